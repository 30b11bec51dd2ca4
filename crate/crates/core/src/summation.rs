//! Compensated (Neumaier) accumulation in a fixed traversal order.
//!
//! Every reduction over particles in this crate goes through these helpers so
//! that the result depends only on the data, never on how the work was split
//! across threads.

use crate::Vec3;

#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum3([NeumaierSum; 3]);

impl NeumaierSum3 {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, v: &Vec3) {
        for k in 0..3 {
            self.0[k].add(v[k]);
        }
    }

    pub fn value(&self) -> Vec3 {
        Vec3::new(self.0[0].value(), self.0[1].value(), self.0[2].value())
    }
}

pub fn sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = NeumaierSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

pub fn sum3<'a, I: IntoIterator<Item = &'a Vec3>>(values: I) -> Vec3 {
    let mut acc = NeumaierSum3::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cancelled_small_terms() {
        let xs = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(sum(xs), 2.0);
        assert_eq!(xs.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn vector_sum_is_componentwise() {
        let vs = [Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 1e-20)];
        let s = sum3(vs.iter());
        assert_eq!(s, Vec3::new(0.0, 2.5, 3.0 + 1e-20));
    }
}
