//! Named trainable parameters.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{Element, Result, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter. The tape dedupes watches by id so
/// a parameter used several times in one step accumulates one gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A named tensor that the optimizer may update.
#[derive(Clone)]
pub struct Param<E: Element> {
    id: ParamId,
    name: String,
    value: Tensor<E>,
    trainable: bool,
}

impl<E: Element> Param<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        Param {
            id: ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Replaces the value, keeping identity. Shape must not change.
    pub fn set_value(&mut self, value: Tensor<E>) {
        assert_eq!(
            self.value.shape(),
            value.shape(),
            "parameter {} shape change",
            self.name
        );
        self.value = value;
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Kaiming-style fan-in initialization for conv / linear weights.
pub fn he_init<E: Element>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl rand::Rng,
) -> Result<Tensor<E>> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::randn(shape, std, rng)
}

/// Order-sensitive checksum over parameter bytes; used by the frozen-phase
/// contract tests to prove immutability, so it must be exact, not tolerant.
pub fn checksum<E: Element>(params: &[&Param<E>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for b in p.name.as_bytes() {
            h = (h ^ *b as u64).wrapping_mul(0x1000_0000_01b3);
        }
        for v in p.value.data() {
            let bits = v.to_f64().to_bits();
            h = (h ^ bits).wrapping_mul(0x1000_0000_01b3);
        }
    }
    h
}
