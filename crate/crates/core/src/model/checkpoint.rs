//! Versioned binary checkpoints.
//!
//! Layout: the magic `LAMCKPT\0`, a little-endian `u32` version, a `u64`
//! manifest length, the UTF-8 manifest (`key=value` lines: configuration,
//! scaler, feature names, and one `param.<name>=<shape>` line per tensor),
//! then every parameter's entries as little-endian `f64` in manifest order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use super::{ForecastModel, ModelConfig};
use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LAMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ForecastModel,
    pub scaler: Scaler,
    pub feature_names: Vec<String>,
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn manifest(ck: &Checkpoint) -> String {
    let c = &ck.model.config;
    let mut s = String::new();
    let _ = writeln!(s, "kind={}", c.mechanism);
    let _ = writeln!(s, "d_features={}", c.d_features);
    let _ = writeln!(s, "d_model={}", c.d_model);
    let _ = writeln!(s, "N={}", c.layers);
    let _ = writeln!(s, "n={}", c.n);
    let _ = writeln!(s, "m={}", c.m);
    let _ = writeln!(s, "h={}", c.heads);
    let _ = writeln!(s, "L={}", c.l);
    let _ = writeln!(s, "alpha={}", c.alpha);
    let _ = writeln!(s, "seed={}", c.seed);
    let _ = writeln!(s, "wiring={}", c.wiring);
    let _ = writeln!(s, "pe={}", c.positional_encoding);
    let _ = writeln!(s, "scaler_means={}", join(&ck.scaler.means));
    let _ = writeln!(s, "scaler_stds={}", join(&ck.scaler.stds));
    for (i, name) in ck.feature_names.iter().enumerate() {
        let _ = writeln!(s, "feature.{i}={}", name.replace(['\n', '\r'], " "));
    }
    for (name, t) in ck.model.params.named() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "param.{name}={}", dims.join("x"));
    }
    s
}

pub fn save(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let text = manifest(ck);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(text.len() as u64).to_le_bytes());
    bytes.extend_from_slice(text.as_bytes());
    for (_, t) in ck.model.params.named() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    };

    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20usize.saturating_add(len))
        .ok_or_else(|| bad("truncated manifest".into()))?;
    let text = std::str::from_utf8(body).map_err(|e| bad(e.to_string()))?;
    let mut payload = &bytes[20 + len..];

    let mut kv: HashMap<&str, &str> = HashMap::new();
    let mut params: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut features: Vec<(usize, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse(format!("bad manifest line `{line}`")))?;
        if let Some(name) = k.strip_prefix("param.") {
            let dims = v
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| parse(format!("bad shape `{v}`")))?;
            params.push((name, dims));
        } else if let Some(idx) = k.strip_prefix("feature.") {
            let idx = idx
                .parse()
                .map_err(|_| parse(format!("bad feature key `{k}`")))?;
            features.push((idx, v.to_string()));
        } else {
            kv.insert(k, v);
        }
    }
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| bad(format!("manifest lacks `{k}`")))
    };
    fn num<T: std::str::FromStr>(k: &str, v: &str, bad: &dyn Fn(String) -> Error) -> Result<T> {
        v.parse()
            .map_err(|_| bad(format!("bad value `{v}` for `{k}`")))
    }
    let field = |k: &str| -> Result<usize> { num(k, get(k)?, &bad) };
    let floats = |k: &str| -> Result<Vec<f64>> {
        let v = get(k)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|x| num(k, x, &bad)).collect()
    };

    let config = ModelConfig {
        mechanism: get("kind")?.parse()?,
        d_features: field("d_features")?,
        d_model: field("d_model")?,
        layers: field("N")?,
        n: field("n")?,
        m: field("m")?,
        heads: field("h")?,
        l: field("L")?,
        alpha: num("alpha", get("alpha")?, &bad)?,
        seed: num("seed", get("seed")?, &bad)?,
        wiring: get("wiring")?.parse()?,
        positional_encoding: num("pe", get("pe")?, &bad)?,
    };
    let template = ForecastModel::new(config)?;
    let names = template.params.named();
    if names.len() != params.len() {
        return Err(bad(format!(
            "{} parameters stored, {} expected",
            params.len(),
            names.len()
        )));
    }
    let mut tensors = Vec::with_capacity(params.len());
    for ((want, t), (name, dims)) in names.iter().zip(&params) {
        if want != name || t.shape() != dims.as_slice() {
            return Err(bad(format!(
                "parameter `{name}` {dims:?} does not match `{want}` {:?}",
                t.shape()
            )));
        }
        let count = t.numel();
        if payload.len() < count * 8 {
            return Err(bad("truncated parameter data".into()));
        }
        let data = payload[..count * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        payload = &payload[count * 8..];
        tensors.push(Tensor::new(dims.clone(), data)?);
    }
    if !payload.is_empty() {
        return Err(bad(format!("{} trailing bytes", payload.len())));
    }
    let params = template.params.with_tensors(tensors)?;

    features.sort_by_key(|f| f.0);
    let feature_names: Vec<String> = features.into_iter().map(|f| f.1).collect();
    let scaler = Scaler {
        means: floats("scaler_means")?,
        stds: floats("scaler_stds")?,
    };
    if feature_names.len() != config.d_features
        || scaler.means.len() != config.d_features
        || scaler.stds.len() != config.d_features
    {
        return Err(bad("feature names or scaler do not match d_features".into()));
    }
    Ok(Checkpoint {
        model: ForecastModel { config, params },
        scaler,
        feature_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CrossWiring, Mechanism};
    use crate::random::{random_matrix, rng};

    fn sample() -> Checkpoint {
        let mut cfg = ModelConfig::new(Mechanism::Lam, 2, 4, 2, 10, 3, 2);
        cfg.alpha = 0.1 + 0.2;
        cfg.seed = 77;
        cfg.wiring = CrossWiring::Conventional;
        let mut model = ForecastModel::new(cfg).unwrap();
        // Weights no seed could reproduce.
        model.params.time.map_inplace(|v| v * std::f64::consts::PI);
        Checkpoint {
            model,
            scaler: Scaler {
                means: vec![1.0 / 3.0, -2.5e-7],
                stds: vec![0.1, 1e10],
            },
            feature_names: vec!["load, kW".into(), "temp".into()],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let f = tempfile::NamedTempFile::new().unwrap();
        save(f.path(), &ck).unwrap();
        let back = load(f.path()).unwrap();
        assert_eq!(back.model.config, ck.model.config);
        assert_eq!(back.scaler, ck.scaler);
        assert_eq!(back.feature_names, ck.feature_names);
        for ((_, a), (_, b)) in ck
            .model
            .params
            .named()
            .iter()
            .zip(back.model.params.named())
        {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let x = random_matrix(&mut rng(1), 10, 2);
        let y0 = ck.model.forward(&x).unwrap();
        let y1 = back.model.forward(&x).unwrap();
        assert!(y0
            .data()
            .iter()
            .zip(y1.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        save(f.path(), &sample()).unwrap();
        let bytes = std::fs::read(f.path()).unwrap();

        std::fs::write(f.path(), &bytes[..bytes.len() - 8]).unwrap();
        assert!(load(f.path()).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        std::fs::write(f.path(), &extra).unwrap();
        assert!(load(f.path()).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        std::fs::write(f.path(), &magic).unwrap();
        assert!(load(f.path()).is_err());
        assert!(matches!(
            load("/no/such/checkpoint.bin"),
            Err(Error::Io { .. })
        ));
    }
}
