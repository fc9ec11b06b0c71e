//! Data-parallel map over independent Monte Carlo work items.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] fans out over the
//! rayon pool; without it every call runs sequentially. Results are always
//! returned in index order so downstream reductions are independent of the
//! worker count.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Evaluates `f(0), …, f(count − 1)` and collects the results in order.
    pub fn map<T, F>(self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..count).into_par_iter().map(f).collect()
            }
            _ => (0..count).map(f).collect(),
        }
    }

    /// Fallible variant of [`Exec::map`]; the first error in index order wins.
    pub fn try_map<T, E, F>(self, count: usize, f: F) -> Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync + Send,
    {
        self.map(count, f).into_iter().collect()
    }
}

/// Pairwise (tree) sum in index order. The association pattern depends only
/// on the slice length.
pub fn pairwise_sum<T>(items: &[T], zero: &T) -> T
where
    T: Clone + for<'a> std::ops::Add<&'a T, Output = T>,
{
    match items.len() {
        0 => zero.clone(),
        1 => items[0].clone(),
        n => {
            let (lo, hi) = items.split_at(n / 2);
            pairwise_sum(lo, zero) + &pairwise_sum(hi, zero)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        let seq = Exec::Sequential.map(100, |i| i * i);
        let par = Exec::Parallel.map(100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn pairwise_sum_matches_plain_sum_on_integers() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v, &0.0), 55.0);
        assert_eq!(pairwise_sum::<f64>(&[], &0.0), 0.0);
    }
}
