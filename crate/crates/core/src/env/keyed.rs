use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// One named array of a [`KeyedBatch`].
#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    F32(Tensor<f32>),
    I32(Tensor<i32>),
    Bool(Tensor<bool>),
}

impl Array {
    pub fn shape(&self) -> &[usize] {
        match self {
            Array::F32(t) => t.shape(),
            Array::I32(t) => t.shape(),
            Array::Bool(t) => t.shape(),
        }
    }

    fn select(&self, rows: &[usize]) -> Array {
        fn pick<T: Copy>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
            let width = t.len() / t.shape()[0].max(1);
            let data = rows.iter().flat_map(|&r| t.data()[r * width..(r + 1) * width].iter().copied()).collect();
            let mut shape = t.shape().to_vec();
            shape[0] = rows.len();
            Tensor::new(shape, data)
        }
        match self {
            Array::F32(t) => Array::F32(pick(t, rows)),
            Array::I32(t) => Array::I32(pick(t, rows)),
            Array::Bool(t) => Array::Bool(pick(t, rows)),
        }
    }
}

/// Named arrays sharing a leading batch dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyedBatch {
    batch: usize,
    arrays: BTreeMap<String, Array>,
}

impl KeyedBatch {
    pub fn new(batch: usize) -> Self {
        KeyedBatch { batch, arrays: BTreeMap::new() }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Panics if the leading extent differs from the batch size.
    pub fn insert(&mut self, key: &str, value: Array) {
        assert_eq!(value.shape().first().copied(), Some(self.batch), "array {key:?} must lead with the batch size");
        self.arrays.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&Array> {
        self.arrays.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn f32(&self, key: &str) -> Option<&Tensor<f32>> {
        match self.arrays.get(key) {
            Some(Array::F32(t)) => Some(t),
            _ => None,
        }
    }

    pub fn i32(&self, key: &str) -> Option<&Tensor<i32>> {
        match self.arrays.get(key) {
            Some(Array::I32(t)) => Some(t),
            _ => None,
        }
    }

    pub fn bool(&self, key: &str) -> Option<&Tensor<bool>> {
        match self.arrays.get(key) {
            Some(Array::Bool(t)) => Some(t),
            _ => None,
        }
    }

    /// `[B, A]` feasibility of every action.
    pub fn action_mask(&self) -> &Tensor<bool> {
        self.bool("action_mask").expect("state without action_mask")
    }

    pub fn done(&self) -> &[bool] {
        self.bool("done").expect("state without done").data()
    }

    pub fn all_done(&self) -> bool {
        self.done().iter().all(|&d| d)
    }

    pub fn select(&self, rows: &[usize]) -> KeyedBatch {
        KeyedBatch { batch: rows.len(), arrays: self.arrays.iter().map(|(k, v)| (k.clone(), v.select(rows))).collect() }
    }
}
