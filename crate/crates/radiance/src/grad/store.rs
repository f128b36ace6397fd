use crate::error::{Error, Result};
use crate::real::Real;
use std::ops::Range;

/// One logical tensor inside the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Per-segment learning-rate multiplier (e.g. 0.05 for MLP decoders that
    /// sit next to grid-like parameters trained at the base rate).
    pub lr_mult: f64,
}

/// Flat learnable-parameter buffer with a paired gradient buffer, shared by
/// all representations. Segments are non-overlapping and cover the buffer.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    values: Vec<T>,
    grads: Vec<T>,
    segments: Vec<Segment>,
}

impl<T: Real> ParamStore<T> {
    /// Build a zero-initialized store from `(name, len, lr_mult)` triples.
    pub fn from_layout(layout: &[(&str, usize, f64)]) -> Self {
        let mut segments = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for (name, len, lr_mult) in layout {
            segments.push(Segment {
                name: (*name).to_string(),
                offset,
                len: *len,
                lr_mult: *lr_mult,
            });
            offset += len;
        }
        ParamStore {
            values: vec![T::ZERO; offset],
            grads: vec![T::ZERO; offset],
            segments,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn grads(&self) -> &[T] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [T] {
        &mut self.grads
    }

    /// Simultaneous read access to values and write access to grads.
    pub fn split(&mut self) -> (&[T], &mut [T]) {
        (&self.values, &mut self.grads)
    }

    /// The optimizer view: mutable values, read-only grads, segment table.
    pub fn split_update(&mut self) -> (&mut [T], &[T], &[Segment]) {
        (&mut self.values, &self.grads, &self.segments)
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(T::ZERO);
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment_range(&self, name: &str) -> Option<Range<usize>> {
        self.segment(name).map(|s| s.offset..s.offset + s.len)
    }

    pub fn segment_values(&self, name: &str) -> Option<&[T]> {
        self.segment_range(name).map(|r| &self.values[r])
    }

    /// Append a segment of zeros (used to attach the temporary feature
    /// adapter during distillation). Returns the new segment's range.
    pub fn push_segment(&mut self, name: &str, len: usize, lr_mult: f64) -> Range<usize> {
        let offset = self.values.len();
        self.values.resize(offset + len, T::ZERO);
        self.grads.resize(offset + len, T::ZERO);
        self.segments.push(Segment {
            name: name.to_string(),
            offset,
            len,
            lr_mult,
        });
        offset..offset + len
    }

    /// Drop the trailing segment by name; panics if it is not the last one.
    pub fn pop_segment(&mut self, name: &str) {
        let seg = self.segments.pop().expect("no segment to pop");
        assert_eq!(seg.name, name, "pop_segment order mismatch");
        assert_eq!(seg.offset + seg.len, self.values.len());
        self.values.truncate(seg.offset);
        self.grads.truncate(seg.offset);
    }

    /// Name of the segment containing a flat index.
    pub fn segment_of(&self, index: usize) -> &str {
        self.segments
            .iter()
            .find(|s| index >= s.offset && index < s.offset + s.len)
            .map(|s| s.name.as_str())
            .unwrap_or("(unknown)")
    }

    fn first_non_finite(buf: &[T], segments: &[Segment]) -> Option<String> {
        let idx = buf.iter().position(|v| !v.is_finite())?;
        Some(
            segments
                .iter()
                .find(|s| idx >= s.offset && idx < s.offset + s.len)
                .map(|s| s.name.clone())
                .unwrap_or_else(|| "(unknown)".to_string()),
        )
    }

    pub fn check_finite_grads(&self, context: &str) -> Result<()> {
        if let Some(segment) = Self::first_non_finite(&self.grads, &self.segments) {
            return Err(Error::NonFinite {
                segment,
                context: format!("gradient, {context}"),
            });
        }
        Ok(())
    }

    pub fn check_finite_values(&self, context: &str) -> Result<()> {
        if let Some(segment) = Self::first_non_finite(&self.values, &self.segments) {
            return Err(Error::NonFinite {
                segment,
                context: format!("parameter, {context}"),
            });
        }
        Ok(())
    }

    /// Cast every parameter (64-bit gradient checks re-run f32 models).
    pub fn convert<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            values: self.values.iter().map(|v| U::cast(v.to_f64())).collect(),
            grads: vec![U::ZERO; self.grads.len()],
            segments: self.segments.clone(),
        }
    }
}

/// Run a differentiable program over the store: `f` reads the values, adds
/// into the gradient buffer and returns the loss. Guards against non-finite
/// results, naming the first offending segment.
pub fn backward<T: Real>(
    store: &mut ParamStore<T>,
    f: impl FnOnce(&[T], &mut [T]) -> T,
) -> Result<T> {
    let segments_snapshot = store.segments.clone();
    let (values, grads) = store.split();
    let loss = f(values, grads);
    if !loss.is_finite() {
        let segment = ParamStore::<T>::first_non_finite(store.grads(), &segments_snapshot)
            .or_else(|| ParamStore::<T>::first_non_finite(store.values(), &segments_snapshot))
            .unwrap_or_else(|| "(loss)".to_string());
        return Err(Error::NonFinite {
            segment,
            context: format!("loss value {loss:?}"),
        });
    }
    store.check_finite_grads("after backward")?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_grads() {
        let mut store: ParamStore<f64> = ParamStore::from_layout(&[("theta", 3, 1.0)]);
        store.values_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        let loss = backward(&mut store, |v, g| {
            let mut l = 0.0;
            for i in 0..v.len() {
                l += v[i] * v[i];
                g[i] += 2.0 * v[i];
            }
            l
        })
        .unwrap();
        assert_eq!(loss, 14.0);
        assert_eq!(store.grads(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn accumulation_is_additive() {
        let mut store: ParamStore<f64> = ParamStore::from_layout(&[("theta", 3, 1.0)]);
        store.values_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        let one_pass = |store: &mut ParamStore<f64>| {
            backward(store, |v, g| {
                let mut l = 0.0;
                for i in 0..v.len() {
                    l += v[i] * v[i];
                    g[i] += 2.0 * v[i];
                }
                l
            })
            .unwrap();
        };
        one_pass(&mut store);
        let single = store.grads().to_vec();
        one_pass(&mut store);
        for (twice, once) in store.grads().iter().zip(&single) {
            assert_eq!(*twice, 2.0 * *once);
        }
    }

    #[test]
    fn nan_guard_names_segment() {
        let mut store: ParamStore<f64> = ParamStore::from_layout(&[("a", 2, 1.0), ("b", 2, 1.0)]);
        let err = backward(&mut store, |_, g| {
            g[2] = f64::NAN;
            f64::NAN
        })
        .unwrap_err();
        match err {
            Error::NonFinite { segment, .. } => assert_eq!(segment, "b"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn push_pop_segment_roundtrip() {
        let mut store: ParamStore<f32> = ParamStore::from_layout(&[("base", 4, 1.0)]);
        store.values_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let range = store.push_segment("adapter", 3, 1.0);
        assert_eq!(range, 4..7);
        assert_eq!(store.len(), 7);
        store.pop_segment("adapter");
        assert_eq!(store.len(), 4);
        assert_eq!(store.values(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
