//! Division of a network into shared base layers and client-private
//! personalization layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, LayerSpec, WeightSet};

/// Layer stack plus the number of trailing personalization layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub k_personal: usize,
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>, k_personal: usize) -> Result<Self> {
        let spec = Self { layers, k_personal };
        spec.validate()?;
        Ok(spec)
    }

    /// ReLU hidden layers and an identity output layer through `dims`.
    pub fn mlp(dims: &[usize], k_personal: usize) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("an mlp needs at least input and output dims".into()));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                LayerSpec::new(d[0], d[1], act)
            })
            .collect();
        Self::new(layers, k_personal)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        if self.k_personal >= self.layers.len() {
            return Err(Error::Config(format!(
                "k_personal = {} leaves no base layer in a {}-layer model",
                self.k_personal,
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::shape(i, "layer dims must be >= 1"));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(
                    i + 1,
                    format!("in_dim {} != previous out_dim {}", pair[1].in_dim, pair[0].out_dim),
                ));
            }
        }
        Ok(())
    }

    pub fn k_base(&self) -> usize {
        self.layers.len() - self.k_personal
    }

    pub fn base_layers(&self) -> &[LayerSpec] {
        &self.layers[..self.k_base()]
    }

    pub fn personal_layers(&self) -> &[LayerSpec] {
        &self.layers[self.k_base()..]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedWeights {
    pub base: WeightSet,
    pub personal: WeightSet,
}

fn check_against(weights: &WeightSet, spec: &ModelSpec) -> Result<()> {
    if weights.len() != spec.layers.len() {
        return Err(Error::shape(
            weights.len().min(spec.layers.len()),
            format!("{} weight layers for a {}-layer spec", weights.len(), spec.layers.len()),
        ));
    }
    for (i, (w, s)) in weights.layers().iter().zip(&spec.layers).enumerate() {
        if w.in_dim() != s.in_dim || w.out_dim() != s.out_dim {
            return Err(Error::shape(i, "weights disagree with spec"));
        }
    }
    Ok(())
}

/// First `K_B` layers become the base, the rest the personalization part.
pub fn split(weights: &WeightSet, spec: &ModelSpec) -> Result<PartitionedWeights> {
    spec.validate()?;
    check_against(weights, spec)?;
    let (base, personal) = weights.layers().split_at(spec.k_base());
    Ok(PartitionedWeights {
        base: WeightSet::new(base.to_vec())?,
        personal: WeightSet::new(personal.to_vec())?,
    })
}

pub fn join(parts: PartitionedWeights) -> Result<WeightSet> {
    let mut layers = parts.base.into_layers();
    layers.extend(parts.personal.into_layers());
    WeightSet::new(layers)
}

/// Replaces every base layer with one identity-activation dense layer from
/// the input straight to the first personalization layer's input.
pub fn linearize_base(spec: &ModelSpec) -> Result<ModelSpec> {
    spec.validate()?;
    let base_out = spec.base_layers()[spec.k_base() - 1].out_dim;
    let mut layers = vec![LayerSpec::new(spec.input_dim(), base_out, Activation::Identity)];
    layers.extend_from_slice(spec.personal_layers());
    ModelSpec::new(layers, spec.k_personal)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_personal_keeps_everything_in_base() {
        let spec = ModelSpec::mlp(&[4, 5, 3], 0).unwrap();
        let w = WeightSet::init(&spec.layers, &mut ChaCha8Rng::seed_from_u64(1));
        let p = split(&w, &spec).unwrap();
        assert!(p.personal.is_empty());
        assert_eq!(p.base, w);
    }

    #[test]
    fn one_personal_layer_is_the_classifier() {
        let spec = ModelSpec::mlp(&[8, 16, 16, 16, 4], 1).unwrap();
        let w = WeightSet::init(&spec.layers, &mut ChaCha8Rng::seed_from_u64(2));
        let p = split(&w, &spec).unwrap();
        assert_eq!(p.base.len(), 3);
        assert_eq!(p.personal.len(), 1);
        assert_eq!(p.personal.layers()[0], w.layers()[3]);
        assert_eq!(join(p).unwrap(), w);
    }

    #[test]
    fn rejects_spec_without_base() {
        assert!(ModelSpec::mlp(&[4, 5, 3], 2).is_err());
    }

    #[test]
    fn split_rejects_inconsistent_weights() {
        let spec = ModelSpec::mlp(&[4, 5, 3], 1).unwrap();
        let other = ModelSpec::mlp(&[4, 6, 3], 1).unwrap();
        let w = WeightSet::init(&other.layers, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(matches!(split(&w, &spec), Err(Error::Shape { layer: 0, .. })));
    }

    #[test]
    fn join_rejects_incompatible_halves() {
        let a = ModelSpec::mlp(&[4, 5], 0).unwrap();
        let b = ModelSpec::mlp(&[6, 3], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let parts = PartitionedWeights {
            base: WeightSet::init(&a.layers, &mut rng),
            personal: WeightSet::init(&b.layers, &mut rng),
        };
        assert!(join(parts).is_err());
    }

    #[test]
    fn linearize_collapses_base() {
        let spec = ModelSpec::new(
            vec![
                LayerSpec::new(8, 16, Activation::Relu),
                LayerSpec::new(16, 16, Activation::Relu),
                LayerSpec::new(16, 4, Activation::Identity),
            ],
            1,
        )
        .unwrap();
        let lin = linearize_base(&spec).unwrap();
        assert_eq!(
            lin.layers,
            vec![
                LayerSpec::new(8, 16, Activation::Identity),
                LayerSpec::new(16, 4, Activation::Identity),
            ]
        );
        assert_eq!(lin.k_personal, 1);
    }

    #[test]
    fn linearize_single_base_layer_only_changes_activation() {
        let spec = ModelSpec::mlp(&[3, 7, 5, 2], 2).unwrap();
        let lin = linearize_base(&spec).unwrap();
        assert_eq!(lin.layers[0], LayerSpec::new(3, 7, Activation::Identity));
        assert_eq!(&lin.layers[1..], &spec.layers[1..]);
    }

    fn arb_spec() -> impl Strategy<Value = ModelSpec> {
        (prop::collection::vec(1usize..9, 2..6), any::<prop::sample::Index>()).prop_map(|(dims, idx)| {
            let n_layers = dims.len() - 1;
            ModelSpec::mlp(&dims, idx.index(n_layers)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn split_join_round_trips(spec in arb_spec(), seed in any::<u64>()) {
            let w = WeightSet::init(&spec.layers, &mut ChaCha8Rng::seed_from_u64(seed));
            let parts = split(&w, &spec).unwrap();
            prop_assert_eq!(parts.base.len() + parts.personal.len(), w.len());
            prop_assert_eq!(parts.base.len(), spec.k_base());
            let back = join(parts).unwrap();
            let same_bits = back.values().zip(w.values()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
            prop_assert_eq!(back, w);
        }

        #[test]
        fn linearized_spec_is_valid(spec in arb_spec()) {
            let lin = linearize_base(&spec).unwrap();
            prop_assert!(lin.validate().is_ok());
            prop_assert_eq!(lin.k_base(), 1);
            prop_assert_eq!(lin.k_personal, spec.k_personal);
            prop_assert_eq!(lin.input_dim(), spec.input_dim());
            prop_assert_eq!(lin.num_classes(), spec.num_classes());
            prop_assert_eq!(lin.layers[0].activation, Activation::Identity);
        }
    }
}
