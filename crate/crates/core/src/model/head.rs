use serde::{Deserialize, Serialize};

use crate::distributions::LatentCode;
use crate::error::{Error, Result};

/// Plain-array copy of the linear classifier: `k + 1` rows over a
/// `d`-dimensional latent space. Rows `0..k` are attribute logits, row `k`
/// is the fake logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::invalid(
                "classifier head needs at least one attribute row plus the fake row",
            ));
        }
        if bias.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} weight rows but {} bias entries",
                weights.len(),
                bias.len()
            )));
        }
        let d = weights[0].len();
        if d == 0 || weights.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("classifier rows must share a positive dimension"));
        }
        if weights.iter().flatten().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite classifier parameter"));
        }
        Ok(Self { weights, bias })
    }

    pub fn num_attributes(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn latent_dim(&self) -> usize {
        self.weights[0].len()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn fake_row(&self) -> usize {
        self.num_attributes()
    }

    /// (k + 1)(d + 1)
    pub fn param_count(&self) -> usize {
        self.weights.len() * (self.latent_dim() + 1)
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(Error::invalid(format!(
                "latent has dimension {} but the head expects {}",
                z.len(),
                self.latent_dim()
            )));
        }
        Ok(())
    }

    pub fn logit(&self, row: usize, z: &[f64]) -> f64 {
        self.bias[row] + dot(&self.weights[row], z)
    }

    /// All `k + 1` logits: W z + b.
    pub fn classify(&self, z: &LatentCode) -> Result<Vec<f64>> {
        self.check_dim(&z.0)?;
        Ok((0..self.weights.len()).map(|r| self.logit(r, &z.0)).collect())
    }

    /// Attribute logits only.
    pub fn attribute_logits(&self, z: &LatentCode) -> Result<Vec<f64>> {
        self.check_dim(&z.0)?;
        Ok((0..self.num_attributes()).map(|r| self.logit(r, &z.0)).collect())
    }

    pub fn row_norm(&self, attribute: usize) -> f64 {
        dot(&self.weights[attribute], &self.weights[attribute]).sqrt()
    }

    /// Unit normal of the attribute's separating hyperplane, w_i / ‖w_i‖.
    pub fn attribute_direction(&self, attribute: usize) -> Result<Vec<f64>> {
        if attribute >= self.num_attributes() {
            return Err(Error::invalid(format!(
                "attribute index {attribute} out of range for {} attributes",
                self.num_attributes()
            )));
        }
        let norm = self.row_norm(attribute);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateDirection { attribute });
        }
        Ok(self.weights[attribute].iter().map(|w| w / norm).collect())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn head_from(rows: Vec<Vec<f64>>, bias: Vec<f64>) -> ClassifierHead {
        ClassifierHead::new(rows, bias).unwrap()
    }

    #[test]
    fn zero_latent_returns_bias() {
        let h = head_from(vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![0.5, -0.5]);
        assert_eq!(h.classify(&LatentCode(vec![0.0, 0.0])).unwrap(), vec![0.5, -0.5]);
    }

    #[test]
    fn direction_normalizes() {
        let h = head_from(vec![vec![3.0, 4.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        let d = h.attribute_direction(0).unwrap();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        assert!(h.attribute_direction(1).is_err());
    }

    #[test]
    fn zero_row_is_degenerate() {
        let h = head_from(vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![0.0, 0.0]);
        assert!(matches!(
            h.attribute_direction(0),
            Err(Error::DegenerateDirection { attribute: 0 })
        ));
    }

    #[test]
    fn rejects_malformed_heads() {
        assert!(ClassifierHead::new(vec![vec![1.0]], vec![0.0]).is_err());
        assert!(ClassifierHead::new(vec![vec![1.0], vec![1.0]], vec![0.0]).is_err());
        assert!(ClassifierHead::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0.0, 0.0]).is_err());
        assert!(ClassifierHead::new(vec![vec![f64::NAN], vec![1.0]], vec![0.0, 0.0]).is_err());
        let h = head_from(vec![vec![1.0], vec![1.0]], vec![0.0, 0.0]);
        assert!(h.classify(&LatentCode(vec![1.0, 2.0])).is_err());
    }

    fn arb_head(d: usize) -> impl Strategy<Value = ClassifierHead> {
        (
            proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, d), 3),
            proptest::collection::vec(-2.0f64..2.0, 3),
        )
            .prop_map(|(w, b)| ClassifierHead::new(w, b).unwrap())
    }

    proptest! {
        #[test]
        fn shift_along_direction_moves_logit_by_delta_norm(
            h in arb_head(4),
            z in proptest::collection::vec(-3.0f64..3.0, 4),
            delta in -6.0f64..6.0,
        ) {
            prop_assume!(h.row_norm(0) > 1e-3);
            let dir = h.attribute_direction(0).unwrap();
            let shifted: Vec<f64> = z.iter().zip(&dir).map(|(a, b)| a + delta * b).collect();
            let before = h.classify(&LatentCode(z)).unwrap();
            let after = h.classify(&LatentCode(shifted)).unwrap();
            prop_assert!((after[0] - before[0] - delta * h.row_norm(0)).abs() < 1e-5);
        }

        #[test]
        fn direction_has_unit_norm(h in arb_head(5)) {
            prop_assume!(h.row_norm(1) > 1e-3);
            let d = h.attribute_direction(1).unwrap();
            prop_assert!((dot(&d, &d).sqrt() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn direction_is_normal_to_boundary(
            h in arb_head(3),
            base in proptest::collection::vec(-3.0f64..3.0, 3),
            tangent in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            prop_assume!(h.row_norm(0) > 1e-2);
            let w = &h.weights()[0];
            let n2 = dot(w, w);
            // project base onto the boundary w·z + b = 0 and tangent onto w⊥
            let t = (h.logit(0, &base)) / n2;
            let on_plane: Vec<f64> = base.iter().zip(w).map(|(z, wi)| z - t * wi).collect();
            let s = dot(&tangent, w) / n2;
            let v: Vec<f64> = tangent.iter().zip(w).map(|(a, wi)| a - s * wi).collect();
            prop_assert!(h.logit(0, &on_plane).abs() < 1e-9);
            let moved: Vec<f64> = on_plane.iter().zip(&v).map(|(a, b)| a + b).collect();
            prop_assert!(h.logit(0, &moved).abs() < 1e-5);
        }

        #[test]
        fn classifier_is_linear_without_bias(
            w in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 3),
            z1 in proptest::collection::vec(-3.0f64..3.0, 3),
            z2 in proptest::collection::vec(-3.0f64..3.0, 3),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let h = ClassifierHead::new(w, vec![0.0; 3]).unwrap();
            let mix: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| a * x + b * y).collect();
            let l1 = h.classify(&LatentCode(z1)).unwrap();
            let l2 = h.classify(&LatentCode(z2)).unwrap();
            let lm = h.classify(&LatentCode(mix)).unwrap();
            for i in 0..3 {
                prop_assert!((lm[i] - (a * l1[i] + b * l2[i])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn homogeneity() {
        let h = head_from(vec![vec![1.0, -2.0], vec![0.5, 0.5]], vec![0.0, 0.0]);
        let a = h.classify(&LatentCode(vec![0.7, 1.3])).unwrap();
        let b = h.classify(&LatentCode(vec![1.4, 2.6])).unwrap();
        for (x, y) in a.iter().zip(b) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }
}
