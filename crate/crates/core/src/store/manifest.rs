//! Model manifests: a JSON document describing a sequential chain of linear
//! layers whose tensors live in a companion container file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::container::{read_container, write_container, Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::netsim::Activation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub weight_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_ref: Option<String>,
    #[serde(default)]
    pub activation_after: Activation,
    #[serde(default = "default_true")]
    pub compressible: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub model_name: String,
    /// Container file, relative to the manifest's directory.
    pub container: String,
    pub layers: Vec<LayerSpec>,
    pub calibration_inputs: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hessians: BTreeMap<String, String>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ModelManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn container_path(&self) -> PathBuf {
        self.base_dir.join(&self.container)
    }

    /// Checks chain consistency and that every referenced tensor exists with
    /// the declared shape.
    pub fn validate(&self, container: &TensorContainer) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Manifest("model has no layers".into()));
        }
        let mut names = std::collections::HashSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if !names.insert(layer.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate layer `{}`", layer.name)));
            }
            if layer.in_features == 0 || layer.out_features == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "layer `{}` has a zero dimension",
                    layer.name
                )));
            }
            if i > 0 {
                let prev = &self.layers[i - 1];
                if layer.in_features != prev.out_features {
                    return Err(Error::BrokenChain {
                        layer: layer.name.clone(),
                        expected: prev.out_features,
                        found: layer.in_features,
                    });
                }
            }
            let shape = [layer.out_features as u64, layer.in_features as u64];
            expect_shape(container, &layer.weight_ref, &shape)?;
            if let Some(bias) = &layer.bias_ref {
                expect_shape(container, bias, &[layer.out_features as u64])?;
            }
            if let Some(h) = self.hessians.get(&layer.name) {
                expect_shape(container, h, &shape)?;
            }
        }
        for key in self.hessians.keys() {
            if !names.contains(key.as_str()) {
                return Err(Error::Manifest(format!("hessian for unknown layer `{key}`")));
            }
        }
        let calib = container.require(&self.calibration_inputs)?;
        let d_in = self.layers[0].in_features as u64;
        if calib.shape().len() != 2 || calib.shape()[1] != d_in {
            return Err(Error::ShapeMismatch(format!(
                "calibration `{}` has shape {:?}, expected [N, {}]",
                self.calibration_inputs,
                calib.shape(),
                d_in
            )));
        }
        Ok(())
    }
}

fn expect_shape(container: &TensorContainer, name: &str, shape: &[u64]) -> Result<()> {
    let t = container.require(name)?;
    if t.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "tensor `{name}` has shape {:?}, expected {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(())
}

/// Reads a manifest and its container, verifying all shape invariants.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<(ModelManifest, TensorContainer)> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut manifest = ModelManifest::from_json(&text)?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let container = read_container(manifest.container_path())?;
    manifest.validate(&container)?;
    Ok((manifest, container))
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `n_out x n_in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn n_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn max_rank(&self) -> usize {
        self.n_out().min(self.n_in())
    }
}

/// A loaded model: float weights, calibration batch and optional Hessians,
/// all widened to f64.
#[derive(Debug, Clone)]
pub struct Model {
    pub name: String,
    pub layers: Vec<Layer>,
    /// `N x d_in`, one sample per row.
    pub calibration: DMatrix<f64>,
    /// User-supplied diagonal Hessians, `n_out x n_in` per layer.
    pub hessians: Vec<Option<DMatrix<f64>>>,
}

impl Model {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let (manifest, container) = load_model(manifest_path)?;
        Model::from_parts(&manifest, &container)
    }

    pub fn from_parts(manifest: &ModelManifest, container: &TensorContainer) -> Result<Self> {
        manifest.validate(container)?;
        let mut layers = Vec::with_capacity(manifest.layers.len());
        let mut hessians = Vec::with_capacity(manifest.layers.len());
        for spec in &manifest.layers {
            let weight = container.require(&spec.weight_ref)?.to_matrix()?;
            let bias = match &spec.bias_ref {
                Some(b) => DVector::from_vec(container.require(b)?.to_f64_vec()?),
                None => DVector::zeros(spec.out_features),
            };
            hessians.push(match manifest.hessians.get(&spec.name) {
                Some(h) => Some(container.require(h)?.to_matrix()?),
                None => None,
            });
            layers.push(Layer {
                spec: spec.clone(),
                weight,
                bias,
            });
        }
        let calibration = container.require(&manifest.calibration_inputs)?.to_matrix()?;
        Ok(Model {
            name: manifest.model_name.clone(),
            layers,
            calibration,
            hessians,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::n_out).unwrap_or(0)
    }

    pub fn weight_count(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.n_out() * l.n_in()) as u64)
            .sum()
    }

    /// Writes `<stem>.json` and `<stem>.mlrq` into `dir`; returns the manifest path.
    /// Tensors pass through f32, so a reloaded model matches only if the
    /// in-memory values were already f32-representable.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut container = TensorContainer::new();
        let mut hessian_refs = BTreeMap::new();
        let mut specs = Vec::with_capacity(self.layers.len());
        for (layer, hessian) in self.layers.iter().zip(&self.hessians) {
            let mut spec = layer.spec.clone();
            spec.weight_ref = format!("{}.weight", spec.name);
            spec.bias_ref = Some(format!("{}.bias", spec.name));
            container.insert(spec.weight_ref.clone(), Tensor::from_matrix(&layer.weight))?;
            container.insert(
                spec.bias_ref.clone().unwrap(),
                Tensor::from_f64_vec(layer.bias.as_slice()),
            )?;
            if let Some(h) = hessian {
                let name = format!("{}.hessian", spec.name);
                container.insert(name.clone(), Tensor::from_matrix(h))?;
                hessian_refs.insert(spec.name.clone(), name);
            }
            specs.push(spec);
        }
        container.insert("calibration", Tensor::from_matrix(&self.calibration))?;
        let manifest = ModelManifest {
            model_name: self.name.clone(),
            container: format!("{stem}.mlrq"),
            layers: specs,
            calibration_inputs: "calibration".into(),
            hessians: hessian_refs,
            base_dir: dir.to_path_buf(),
        };
        write_container(&container, manifest.container_path())?;
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, manifest.to_json())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(name: &str, n_in: usize, n_out: usize) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            in_features: n_in,
            out_features: n_out,
            weight_ref: format!("{name}.w"),
            bias_ref: None,
            activation_after: Activation::None,
            compressible: true,
        }
    }

    fn build(dims: &[usize], declared: &[(usize, usize)]) -> (ModelManifest, TensorContainer) {
        let mut c = TensorContainer::new();
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let name = format!("l{i}");
            let (n_in, n_out) = declared[i];
            c.insert(
                format!("{name}.w"),
                Tensor::from_f32(&[w[1], w[0]], &vec![0.5; w[0] * w[1]]).unwrap(),
            )
            .unwrap();
            layers.push(spec(&name, n_in, n_out));
        }
        c.insert("x", Tensor::from_f32(&[2, dims[0]], &vec![1.0; 2 * dims[0]]).unwrap())
            .unwrap();
        let m = ModelManifest {
            model_name: "t".into(),
            container: "t.mlrq".into(),
            layers,
            calibration_inputs: "x".into(),
            hessians: BTreeMap::new(),
            base_dir: PathBuf::new(),
        };
        (m, c)
    }

    #[test]
    fn consistent_chain_loads() {
        let (m, c) = build(&[4, 3, 2], &[(4, 3), (3, 2)]);
        let model = Model::from_parts(&m, &c).unwrap();
        assert_eq!(model.layers.len(), 2);
        assert_eq!(model.layers[1].weight.shape(), (2, 3));
    }

    #[test]
    fn broken_chain_rejected() {
        let (m, c) = build(&[4, 3, 2], &[(4, 3), (5, 2)]);
        assert!(matches!(m.validate(&c), Err(Error::BrokenChain { .. })));
    }

    #[test]
    fn hessian_shape_checked() {
        let (mut m, mut c) = build(&[4, 3], &[(4, 3)]);
        c.insert("h", Tensor::from_f32(&[2, 2], &[1.0; 4]).unwrap()).unwrap();
        m.hessians.insert("l0".into(), "h".into());
        assert!(matches!(m.validate(&c), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn missing_tensor_reported() {
        let (mut m, c) = build(&[4, 3], &[(4, 3)]);
        m.layers[0].weight_ref = "nope".into();
        assert!(matches!(m.validate(&c), Err(Error::MissingTensor(n)) if n == "nope"));
    }

    #[test]
    fn save_and_load_from_disk() {
        let (m, c) = build(&[4, 3, 2], &[(4, 3), (3, 2)]);
        let model = Model::from_parts(&m, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = model.save(dir.path(), "toy").unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.layers[0].weight, model.layers[0].weight);
        assert_eq!(back.calibration, model.calibration);
    }

    proptest! {
        #[test]
        fn fuzzed_declarations_rejected_unless_consistent(
            dims in prop::collection::vec(1usize..5, 2..5),
            perturb in prop::collection::vec((0usize..2, 1usize..5), 4),
        ) {
            let n = dims.len() - 1;
            let mut declared: Vec<(usize, usize)> =
                dims.windows(2).map(|w| (w[0], w[1])).collect();
            for (i, (which, v)) in perturb.iter().take(n).enumerate() {
                if *which == 0 { declared[i].0 = *v } else { declared[i].1 = *v }
            }
            let (m, c) = build(&dims, &declared);
            let consistent = declared.iter().zip(dims.windows(2))
                .all(|(d, w)| d.0 == w[0] && d.1 == w[1]);
            prop_assert_eq!(m.validate(&c).is_ok(), consistent);
        }
    }
}
