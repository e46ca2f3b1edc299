//! Plain-text model checkpoints and buffer dumps.
//!
//! Floats are written in Rust's shortest round-trip form, so loading a saved
//! file reproduces every parameter bit for bit.
//!
//! ```text
//! dualhsic-checkpoint 1
//! seed 0
//! input_dim 20
//! hidden_dims 64 64
//! num_classes 10
//! activation relu
//! classes_per_task 2
//! normalization_mean 0.1 -0.3 ...
//! normalization_std 1.02 0.97 ...
//! tensor encoder.0.weight 20 64
//! 0.0123 -0.044 ...
//! ...
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::buffer::{BufferEntry, RehearsalBuffer};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::network::{Activation, InitRecord, InitScheme, MlpParams, MlpSpec, ProjectionHead};
use crate::rng::RngState;
use crate::Model;

const CHECKPOINT_MAGIC: &str = "dualhsic-checkpoint 1";
const BUFFER_MAGIC: &str = "dualhsic-buffer 1";

/// A trained model plus what is needed to feed it new data.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub classes_per_task: usize,
    pub normalization: Option<Normalization>,
}

impl Checkpoint {
    pub fn spec(&self) -> &MlpSpec {
        &self.model.net.spec
    }

    pub fn to_text(&self) -> String {
        let spec = self.spec();
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "seed {}", self.model.net.init.seed);
        let _ = writeln!(out, "input_dim {}", spec.input_dim);
        let _ = writeln!(out, "hidden_dims {}", join(&spec.hidden_dims));
        let _ = writeln!(out, "num_classes {}", spec.num_classes);
        let _ = writeln!(out, "activation {}", spec.activation.name());
        let _ = writeln!(out, "classes_per_task {}", self.classes_per_task);
        if let Some(n) = &self.normalization {
            let _ = writeln!(out, "normalization_mean {}", join_floats(&n.mean));
            let _ = writeln!(out, "normalization_std {}", join_floats(&n.std));
        }
        for (name, m) in self.model.named_tensors() {
            let _ = writeln!(out, "tensor {name} {} {}", m.rows(), m.cols());
            let _ = writeln!(out, "{}", join_floats(m.as_slice()));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("checkpoint", d);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing header line".into()));
        }
        let mut header: HashMap<&str, &str> = HashMap::new();
        let mut tensors: Vec<(&str, usize, usize, &str)> = Vec::new();
        while let Some(line) = lines.next() {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            if key == "tensor" {
                let f: Vec<&str> = rest.split_whitespace().collect();
                let [name, r, c] = f[..] else {
                    return Err(bad(format!("malformed tensor line '{line}'")));
                };
                let values = lines
                    .next()
                    .ok_or_else(|| bad(format!("tensor {name} has no values")))?;
                tensors.push((name, parse(r, "rows")?, parse(c, "cols")?, values));
            } else if header.insert(key, rest.trim()).is_some() {
                return Err(bad(format!("duplicate key '{key}'")));
            }
        }
        let field = |k: &str| {
            header
                .get(k)
                .copied()
                .ok_or_else(|| bad(format!("missing '{k}'")))
        };

        let spec = MlpSpec::new(
            parse(field("input_dim")?, "input_dim")?,
            field("hidden_dims")?
                .split_whitespace()
                .map(|v| parse(v, "hidden_dims"))
                .collect::<Result<_>>()?,
            parse(field("num_classes")?, "num_classes")?,
            field("activation")?.parse::<Activation>()?,
        )?;
        let seed: u64 = parse(field("seed")?, "seed")?;
        let classes_per_task = parse(field("classes_per_task")?, "classes_per_task")?;
        let normalization = match (
            header.get("normalization_mean"),
            header.get("normalization_std"),
        ) {
            (Some(m), Some(s)) => Some(Normalization {
                mean: parse_floats(m)?,
                std: parse_floats(s)?,
            }),
            (None, None) => None,
            _ => return Err(bad("normalization needs both mean and std".into())),
        };
        if let Some(n) = &normalization {
            if n.mean.len() != spec.input_dim || n.std.len() != spec.input_dim {
                return Err(bad("normalization width differs from input_dim".into()));
            }
        }

        let mut net = MlpParams::zeros(&spec)?;
        net.init = InitRecord {
            seed,
            scheme: InitScheme::FanInUniform,
        };
        let mut model = Model {
            net,
            head: ProjectionHead::zeros(spec.latent_dim(), spec.activation),
        };
        let mut slots = model.named_tensors_mut();
        if slots.len() != tensors.len() {
            return Err(bad(format!(
                "expected {} tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((name, slot), (got, rows, cols, values)) in slots.iter_mut().zip(tensors) {
            if name != got || slot.shape() != (rows, cols) {
                return Err(bad(format!(
                    "tensor {got} {rows}x{cols} does not match {name} {:?}",
                    slot.shape()
                )));
            }
            let v = parse_floats(values)?;
            if v.len() != rows * cols {
                return Err(bad(format!(
                    "tensor {got} has {} values, expected {}",
                    v.len(),
                    rows * cols
                )));
            }
            slot.as_mut_slice().copy_from_slice(&v);
        }
        Ok(Self {
            model,
            classes_per_task,
            normalization,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Serializes a buffer with its reservoir generator position, so a resumed
/// run keeps making the same replacement decisions.
pub fn buffer_to_text(buffer: &RehearsalBuffer<f64>) -> String {
    let rng = buffer.rng();
    let mut out = String::new();
    let _ = writeln!(out, "{BUFFER_MAGIC}");
    let _ = writeln!(out, "capacity {}", buffer.capacity());
    let _ = writeln!(out, "observed {}", buffer.observed());
    let _ = writeln!(
        out,
        "rng {} {} {}",
        rng.seed(),
        rng.stream(),
        rng.word_pos()
    );
    let _ = writeln!(out, "entries {}", buffer.len());
    for e in buffer.entries() {
        let _ = writeln!(out, "entry {} {} {}", e.y, e.task_id, e.insertion_index);
        let _ = writeln!(out, "x {}", join_floats(&e.x));
        match &e.logits {
            Some(l) => {
                let _ = writeln!(out, "logits {}", join_floats(l));
            }
            None => {
                let _ = writeln!(out, "logits none");
            }
        }
    }
    out
}

pub fn buffer_from_text(text: &str) -> Result<RehearsalBuffer<f64>> {
    let bad = |d: String| Error::format("buffer dump", d);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(BUFFER_MAGIC) {
        return Err(bad("missing header line".into()));
    }
    let mut next = |key: &str| -> Result<&str> {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("expected '{key}', found end of file")))?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest.trim()),
            _ => Err(bad(format!("expected '{key}', found '{line}'"))),
        }
    };
    let capacity = parse(next("capacity")?, "capacity")?;
    let observed = parse(next("observed")?, "observed")?;
    let rng_fields: Vec<&str> = next("rng")?.split_whitespace().collect();
    let [seed, stream, pos] = rng_fields[..] else {
        return Err(bad("rng needs seed, stream and word position".into()));
    };
    let rng = RngState::restore(
        parse(seed, "seed")?,
        parse(stream, "stream")?,
        parse(pos, "word_pos")?,
    );
    let count: usize = parse(next("entries")?, "entries")?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let meta: Vec<&str> = next("entry")?.split_whitespace().collect();
        let [y, task, idx] = meta[..] else {
            return Err(bad("entry needs label, task and insertion index".into()));
        };
        let x = parse_floats(next("x")?)?;
        let logits = match next("logits")? {
            "none" => None,
            v => Some(parse_floats(v)?),
        };
        entries.push(BufferEntry {
            x,
            y: parse(y, "label")?,
            logits,
            task_id: parse(task, "task")?,
            insertion_index: parse(idx, "insertion index")?,
        });
    }
    RehearsalBuffer::from_parts(capacity, entries, observed, rng)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn join_floats(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse<F: std::str::FromStr>(s: &str, what: &str) -> Result<F> {
    s.trim()
        .parse()
        .map_err(|_| Error::format("checkpoint", format!("invalid {what} '{s}'")))
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace().map(|v| parse(v, "number")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let spec = MlpSpec::new(3, vec![5, 4], 2, Activation::Tanh).unwrap();
        Checkpoint {
            model: Model::init(&spec, 9).unwrap(),
            classes_per_task: 1,
            normalization: Some(Normalization {
                mean: vec![0.1, -2.0, 1e-300],
                std: vec![1.0, 0.3, 7.0],
            }),
        }
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let ck = sample();
        assert_eq!(Checkpoint::from_text(&ck.to_text()).unwrap(), ck);
        let mut plain = ck.clone();
        plain.normalization = None;
        assert_eq!(Checkpoint::from_text(&plain.to_text()).unwrap(), plain);
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let text = sample().to_text();
        assert!(Checkpoint::from_text("").is_err());
        assert!(
            Checkpoint::from_text(&text.replace("hidden_dims 5 4", "hidden_dims 5 3")).is_err()
        );
        assert!(Checkpoint::from_text(
            &text.replace("tensor classifier.bias 1 2", "tensor classifier.bias 2 1")
        )
        .is_err());
        let truncated: String = text.lines().take(12).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::from_text(&truncated).is_err());
    }

    #[test]
    fn buffer_round_trip_resumes_identically() {
        let mut b = RehearsalBuffer::new(4, RngState::new(5).split(2));
        for i in 0..9 {
            b.observe(BufferEntry {
                x: vec![i as f64 * 0.1, -1.0 / 3.0],
                y: i % 2,
                logits: (i % 3 == 0).then(|| vec![0.5, f64::MIN_POSITIVE]),
                task_id: i / 4,
                insertion_index: 0,
            });
        }
        let mut restored = buffer_from_text(&buffer_to_text(&b)).unwrap();
        assert_eq!(restored.entries(), b.entries());
        assert_eq!(restored.observed(), b.observed());
        for i in 9..40 {
            let e = BufferEntry {
                x: vec![i as f64, 0.0],
                y: 0,
                logits: None,
                task_id: 3,
                insertion_index: 0,
            };
            b.observe(e.clone());
            restored.observe(e);
        }
        assert_eq!(restored.entries(), b.entries());
    }
}
