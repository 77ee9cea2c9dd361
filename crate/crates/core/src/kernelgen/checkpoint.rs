//! Directory checkpoints: one `FXT1` file per tensor plus `manifest.txt`.
//!
//! ```text
//! # flexkernel checkpoint v1
//! gamma_convention = shape-rate
//! seed = 7
//! [tensors]
//! gabor.0.gamma_x 32 gabor.0.gamma_x.fxt
//! gabor.0.weight 32x2 gabor.0.weight.fxt
//! ```
//!
//! Metadata lines are `key = value`; tensor lines list the name, the shape
//! (`x`-separated, `-` for rank 0) and the file, in save order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernelgen::init::InitConfig;
use crate::kernelgen::magnet::{Magnet, MagnetShape};
use crate::numerics::io;
use crate::numerics::params::{load_named, named_tensors};
use crate::numerics::rng::GAMMA_CONVENTION;
use crate::{Scalar, Tensor};

const HEADER: &str = "# flexkernel checkpoint v1";
const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for Checkpoint<T> {
    fn default() -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_owned(), value.to_string());
    }

    pub fn get<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::format("checkpoint", format!("missing metadata key {key}")))?;
        raw.parse()
            .map_err(|_| Error::format("checkpoint", format!("bad value for {key}: {raw}")))
    }

    pub fn tensor_map(&self) -> BTreeMap<String, Tensor<T>> {
        self.tensors.iter().cloned().collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("{HEADER}\n");
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::contract(format!("metadata entry {k:?} is not a single key = value line")));
            }
            writeln!(manifest, "{k} = {v}").expect("string write");
        }
        manifest.push_str("[tensors]\n");
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) || name.contains(['/', '\\']) {
                return Err(Error::contract(format!("tensor name {name:?} is not a plain token")));
            }
            let file = format!("{name}.fxt");
            io::write_file(dir.join(&file), t)?;
            writeln!(manifest, "{name} {} {file}", format_shape(t.shape())).expect("string write");
        }
        let path = dir.join(MANIFEST);
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::format("checkpoint", "missing manifest header"));
        }
        let mut ck = Checkpoint::default();
        let mut in_tensors = false;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            if line == "[tensors]" {
                in_tensors = true;
            } else if in_tensors {
                let parts: Vec<&str> = line.split(' ').collect();
                let [name, shape, file] = parts[..] else {
                    return Err(Error::format("checkpoint", format!("bad tensor line {line:?}")));
                };
                let t: Tensor<T> = io::read_file(dir.join(file))?;
                if format_shape(t.shape()) != shape {
                    return Err(Error::format(
                        "checkpoint",
                        format!("{name}: manifest shape {shape}, file shape {:?}", t.shape()),
                    ));
                }
                ck.tensors.push((name.to_owned(), t));
            } else {
                let (k, v) = line
                    .split_once(" = ")
                    .ok_or_else(|| Error::format("checkpoint", format!("bad metadata line {line:?}")))?;
                ck.meta.insert(k.to_owned(), v.to_owned());
            }
        }
        Ok(ck)
    }
}

fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_owned()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

/// Packs a network with its architecture and initialization metadata.
pub fn magnet_checkpoint<T: Scalar>(m: &Magnet<Tensor<T>>, init: &InitConfig) -> Checkpoint<T> {
    let mut ck = Checkpoint::default();
    ck.set("gamma_convention", GAMMA_CONVENTION);
    ck.set("seed", init.seed);
    ck.set("init.alpha", init.alpha);
    ck.set("init.beta", init.beta);
    ck.set("init.linear_scale", init.linear_scale);
    if let Some(s) = init.sine_weight_scale {
        ck.set("init.sine_weight_scale", s);
    }
    let s = m.shape;
    ck.set("magnet.dims", s.dims);
    ck.set("magnet.layers", s.layers);
    ck.set("magnet.hidden", s.hidden);
    ck.set("magnet.in_channels", s.in_channels);
    ck.set("magnet.out_channels", s.out_channels);
    ck.set("magnet.isotropic", s.isotropic);
    ck.tensors = named_tensors(m, "magnet");
    ck
}

/// Rebuilds a network saved by [`magnet_checkpoint`].
pub fn magnet_from_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Result<(Magnet<Tensor<T>>, InitConfig)> {
    let convention: String = ck.get("gamma_convention")?;
    if convention != GAMMA_CONVENTION {
        return Err(Error::format("checkpoint", format!("unsupported gamma convention {convention}")));
    }
    let shape = MagnetShape {
        dims: ck.get("magnet.dims")?,
        layers: ck.get("magnet.layers")?,
        hidden: ck.get("magnet.hidden")?,
        in_channels: ck.get("magnet.in_channels")?,
        out_channels: ck.get("magnet.out_channels")?,
        isotropic: ck.get("magnet.isotropic")?,
    };
    let init = InitConfig {
        alpha: ck.get("init.alpha")?,
        beta: ck.get("init.beta")?,
        linear_scale: ck.get("init.linear_scale")?,
        sine_weight_scale: ck.get("init.sine_weight_scale").ok(),
        seed: ck.get("seed")?,
    };
    let mut m = crate::kernelgen::init::init_magnet(shape, &init, &mut crate::RngStream::new(init.seed))?;
    load_named(&mut m, "magnet", &ck.tensor_map())?;
    m.validate()?;
    Ok((m, init))
}
