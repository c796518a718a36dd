//! Flat `key = value` run configuration.
//!
//! The file is TOML. Tables are flattened into dotted keys, so
//! `[base]\niterations = 50` and `base.iterations = 50` mean the same thing.
//! `--set key=value` overrides are applied on top of the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fsdet_core::trainer::Mode;

use crate::CliError;

/// Every accepted key with its default (`None` = required or derived) and a
/// one-line description. Printed by `fsdet keys`.
pub const SCHEMA: &[(&str, Option<&str>, &str)] = &[
    ("seed", None, "master seed; required"),
    ("data.root", None, "dataset directory (images/ + annotations/); required"),
    ("out", Some("\"runs\""), "output root; the FSDET_OUT environment variable takes precedence"),
    ("mode", Some("\"ours\""), "ours | frcn_few | frcn_joint | frcn_ft"),
    ("split.novel", None, "novel class name; drawn at random from split.seed when absent"),
    ("split.train_ratio", Some("0.6"), "fraction of images in the training partition"),
    ("split.seed", None, "partition and class-draw seed; defaults to seed"),
    ("kshot.k", Some("10"), "shots per class used by finetune"),
    ("kshot.ks", None, "k values prepare writes manifests for; defaults to [kshot.k]"),
    ("kshot.seed", None, "k-shot draw seed; defaults to seed"),
    ("base.iterations", Some("300"), "base-phase iterations"),
    ("base.learning_rate", Some("1e-3"), "base-phase SGD step size"),
    ("base.momentum", Some("0.9"), "base-phase SGD momentum"),
    ("finetune.iterations", Some("300"), "fine-tuning iterations"),
    ("finetune.learning_rate", Some("1e-4"), "fine-tuning SGD step size"),
    ("finetune.momentum", Some("0.9"), "fine-tuning SGD momentum"),
    ("eval.modes", None, "modes to evaluate; defaults to [mode]"),
    ("eval.ks", None, "k values to evaluate; defaults to kshot.ks"),
    ("eval.detections", Some("false"), "also export detections as JSON lines"),
    ("fixture.classes", Some("4"), "fixture command: number of shape classes"),
    ("fixture.images", Some("160"), "fixture command: number of images"),
    ("fixture.size", Some("128"), "fixture command: image side in pixels"),
    ("fixture.min_objects", Some("1"), "fixture command: fewest objects per image"),
    ("fixture.max_objects", Some("3"), "fixture command: most objects per image"),
    ("fixture.seed", None, "fixture command: seed; defaults to seed"),
];

pub type Table = BTreeMap<String, toml::Value>;

fn flatten(prefix: &str, table: toml::Table, out: &mut Table) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            v => {
                out.insert(key, v);
            }
        }
    }
}

/// A `--set` value is read as a TOML value when it parses as one and as a
/// bare string otherwise, so `--set mode=ours` needs no quotes.
fn parse_override(s: &str) -> Result<(String, toml::Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::input(format!("--set expects key=value, got `{s}`")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Reads the file, applies overrides and rejects unknown keys.
pub fn load_table(path: &Path, overrides: &[String]) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
    let doc: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let mut table = Table::new();
    flatten("", doc, &mut table);
    for o in overrides {
        let (k, v) = parse_override(o)?;
        table.insert(k, v);
    }
    for k in table.keys() {
        if !SCHEMA.iter().any(|(name, _, _)| name == k) {
            return Err(CliError::input(format!("unknown config key `{k}`")));
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSettings {
    pub classes: usize,
    pub images: usize,
    pub size: u32,
    pub objects: (usize, usize),
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSettings {
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

/// The merged, typed view of a run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: PathBuf,
    pub out: PathBuf,
    pub mode: Mode,
    pub novel: Option<String>,
    pub train_ratio: f64,
    pub split_seed: u64,
    pub k: usize,
    pub ks: Vec<usize>,
    pub kshot_seed: u64,
    pub base: PhaseSettings,
    pub finetune: PhaseSettings,
    pub eval_modes: Vec<Mode>,
    pub eval_ks: Vec<usize>,
    pub export_detections: bool,
    pub fixture: FixtureSettings,
    /// The flattened table the config was built from, overrides included.
    pub table: Table,
}

struct Reader<'a>(&'a Table);

impl Reader<'_> {
    fn get(&self, key: &str) -> Option<&toml::Value> {
        self.0.get(key)
    }

    fn bad(key: &str, want: &str, v: &toml::Value) -> CliError {
        CliError::input(format!("config key `{key}` must be {want}, got {v}"))
    }

    fn uint(&self, key: &str) -> Result<Option<u64>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(v) => Err(Self::bad(key, "a non-negative integer", v)),
        }
    }

    fn float(&self, key: &str) -> Result<Option<f64>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(toml::Value::Float(f)) => Ok(Some(*f)),
            Some(toml::Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(v) => Err(Self::bad(key, "a number", v)),
        }
    }

    fn string(&self, key: &str) -> Result<Option<String>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(Self::bad(key, "a string", v)),
        }
    }

    fn boolean(&self, key: &str) -> Result<Option<bool>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(toml::Value::Boolean(b)) => Ok(Some(*b)),
            Some(v) => Err(Self::bad(key, "true or false", v)),
        }
    }

    fn list<T>(&self, key: &str, item: impl Fn(&toml::Value) -> Option<T>) -> Result<Option<Vec<T>>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(toml::Value::Array(a)) => a
                .iter()
                .map(|v| item(v).ok_or_else(|| Self::bad(key, "a list of valid entries", v)))
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
            // a single value stands for a one-element list
            Some(v) => item(v).map(|x| Some(vec![x])).ok_or_else(|| Self::bad(key, "a list", v)),
        }
    }
}

fn as_k(v: &toml::Value) -> Option<usize> {
    v.as_integer().filter(|&i| i > 0).map(|i| i as usize)
}

fn as_mode(v: &toml::Value) -> Option<Mode> {
    v.as_str().and_then(|s| s.parse().ok())
}

impl RunConfig {
    /// Builds the typed view. `out_env` is the value of FSDET_OUT, if set.
    pub fn from_table(table: Table, out_env: Option<PathBuf>) -> Result<Self, CliError> {
        let r = Reader(&table);
        let seed = r
            .uint("seed")?
            .ok_or_else(|| CliError::input("config must set `seed`"))?;
        let data_root = r
            .string("data.root")?
            .ok_or_else(|| CliError::input("config must set `data.root`"))?
            .into();
        let out = out_env.unwrap_or_else(|| r.string("out").ok().flatten().unwrap_or_else(|| "runs".into()).into());
        let mode = match r.string("mode")? {
            Some(s) => s.parse().map_err(|e: fsdet_core::Error| CliError::input(e.to_string()))?,
            None => Mode::Ours,
        };
        let k = match r.uint("kshot.k")? {
            Some(0) => return Err(CliError::input("kshot.k must be at least 1")),
            Some(k) => k as usize,
            None => 10,
        };
        let ks = r.list("kshot.ks", as_k)?.unwrap_or_else(|| vec![k]);
        let train_ratio = r.float("split.train_ratio")?.unwrap_or(0.6);
        if !(train_ratio > 0.0 && train_ratio < 1.0) {
            return Err(CliError::input(format!("split.train_ratio must be in (0,1), got {train_ratio}")));
        }
        let phase = |p: &str, lr: f64| -> Result<PhaseSettings, CliError> {
            Ok(PhaseSettings {
                iterations: r.uint(&format!("{p}.iterations"))?.unwrap_or(300) as usize,
                learning_rate: r.float(&format!("{p}.learning_rate"))?.unwrap_or(lr),
                momentum: r.float(&format!("{p}.momentum"))?.unwrap_or(0.9),
            })
        };
        let fixture = FixtureSettings {
            classes: r.uint("fixture.classes")?.unwrap_or(4) as usize,
            images: r.uint("fixture.images")?.unwrap_or(160) as usize,
            size: r.uint("fixture.size")?.unwrap_or(128) as u32,
            objects: (
                r.uint("fixture.min_objects")?.unwrap_or(1) as usize,
                r.uint("fixture.max_objects")?.unwrap_or(3) as usize,
            ),
            seed: r.uint("fixture.seed")?.unwrap_or(seed),
        };
        Ok(Self {
            seed,
            data_root,
            out,
            mode,
            novel: r.string("split.novel")?,
            train_ratio,
            split_seed: r.uint("split.seed")?.unwrap_or(seed),
            k,
            eval_ks: r.list("eval.ks", as_k)?.unwrap_or_else(|| ks.clone()),
            ks,
            kshot_seed: r.uint("kshot.seed")?.unwrap_or(seed),
            base: phase("base", 1e-3)?,
            finetune: phase("finetune", 1e-4)?,
            eval_modes: r.list("eval.modes", as_mode)?.unwrap_or_else(|| vec![mode]),
            export_detections: r.boolean("eval.detections")?.unwrap_or(false),
            fixture,
            table,
        })
    }

    /// Every command except `fixture` reads an existing dataset.
    pub fn check_data_root(&self) -> Result<(), CliError> {
        if !self.data_root.is_dir() {
            return Err(CliError::input(format!(
                "dataset root {} is not a directory",
                self.data_root.display()
            )));
        }
        Ok(())
    }

    /// The resolved configuration as JSON, keys sorted.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.table).expect("toml values serialize")
    }

    pub fn prepare_dir(&self) -> PathBuf {
        self.out.join("prepare")
    }

    pub fn split_manifest(&self) -> PathBuf {
        self.prepare_dir().join("split.json")
    }

    pub fn kshot_manifest(&self, k: usize) -> PathBuf {
        self.prepare_dir().join(format!("kshot_k{k}.json"))
    }

    pub fn base_dir(&self, mode: Mode) -> PathBuf {
        self.out.join("base").join(mode.as_str())
    }

    pub fn finetune_dir(&self, mode: Mode, k: usize) -> PathBuf {
        self.out.join("finetune").join(mode.as_str()).join(format!("k{k}"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    pub fn plot_dir(&self) -> PathBuf {
        self.out.join("plots")
    }
}
