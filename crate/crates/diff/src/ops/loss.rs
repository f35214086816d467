use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// Batch mean of `-log softmax(logits)[label]`, computed with the
    /// row maximum subtracted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * k);
        let mut total = T::zero();
        for (row, &label) in x.chunks(k).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            total += log_denom - (row[label] - max);
            probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
        }
        let value = Tensor::scalar(total / T::from_usize(b).unwrap());
        let op = Op::SoftmaxCe {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(op, &[logits], value))
    }
}

pub(crate) fn softmax_ce_backward<T: Scalar>(probs: &[T], labels: &[usize], g: &[T]) -> Vec<Option<Vec<T>>> {
    let b = labels.len();
    let k = probs.len() / b;
    let scale = g[0] / T::from_usize(b).unwrap();
    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (i, &l) in labels.iter().enumerate() {
        d[i * k + l] -= scale;
    }
    vec![Some(d)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: Tensor<f64>, labels: &[usize]) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(logits);
        let l = g.softmax_cross_entropy(x, labels).unwrap();
        g.value(l).item()
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let l = ce(Tensor::zeros(&[2, 4]), &[0, 3]);
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_true_logit_is_free() {
        let l = ce(Tensor::from_f64(&[1, 3], &[0.0, 50.0, 0.0]).unwrap(), &[1]);
        assert!((0.0..=1e-9).contains(&l));
    }

    #[test]
    fn matches_direct_definition() {
        let vals: Vec<f64> = (0..15).map(|i| ((i * 7919) % 23) as f64 / 5.0 - 2.0).collect();
        let labels = [4, 0, 2];
        let got = ce(Tensor::from_f64(&[3, 5], &vals).unwrap(), &labels);
        let mut expect = 0.0;
        for (row, &l) in vals.chunks(5).zip(&labels) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[l].exp() / z).ln();
        }
        expect /= 3.0;
        assert!((got - expect).abs() <= 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.softmax_cross_entropy(x, &[3]), Err(Error::Data(_))));
    }
}
