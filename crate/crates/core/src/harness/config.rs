//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys, malformed values and inconsistent dimensions are
//! all reported together.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::optim::{OptimConfig, OptimKind};
use crate::error::{Error, Result};
use crate::nn::attpool::{AttPoolConfig, CrossKind};
use crate::nn::backbone::{BackboneConfig, InputKind};
use crate::objectives::DinoConfig;
use crate::sparo::{EncoderConfig, HeadConfig, HeadKind, SparoConfig};
use crate::synthworld::WorldSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Clip,
    Dino,
}

impl Task {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clip" => Some(Task::Clip),
            "dino" => Some(Task::Dino),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Clip => "clip",
            Task::Dino => "dino",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to zero at the last step.
    Cosine,
}

/// Architecture of one tower; the input kind comes from the world spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub max_positions: usize,
    pub causal: bool,
}

impl TowerConfig {
    fn desk(causal: bool) -> Self {
        TowerConfig {
            blocks: 2,
            width: 32,
            heads: 4,
            mlp_ratio: 4.0,
            max_positions: 16,
            causal,
        }
    }

    fn backbone(&self, input: InputKind) -> BackboneConfig {
        BackboneConfig {
            num_blocks: self.blocks,
            width: self.width,
            num_heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            max_positions: self.max_positions,
            input,
            causal: self.causal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub compositional: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: usize,
    pub eval_every: usize,
    /// Held-out items used by the periodic evaluation.
    pub eval_size: usize,
    pub knn_k: usize,
    pub image: TowerConfig,
    pub text: TowerConfig,
    pub head: HeadConfig,
    pub replace_last_block: bool,
    pub world: WorldSpec,
    pub data: DataConfig,
    pub dino: DinoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Clip,
            seed: 0,
            steps: 2000,
            batch_size: 32,
            optim: OptimConfig {
                kind: OptimKind::AdamW,
                lr: 2e-3,
                weight_decay: 0.01,
                ..OptimConfig::default()
            },
            lr_schedule: LrSchedule::Cosine,
            warmup_steps: 100,
            eval_every: 250,
            eval_size: 256,
            knn_k: 5,
            image: TowerConfig::desk(false),
            text: TowerConfig::desk(true),
            head: HeadConfig {
                kind: HeadKind::Sparo,
                sparo: SparoConfig::desk(),
                attpool: AttPoolConfig::baseline(8, 8, 4),
                bottleneck_dim: 64,
            },
            replace_last_block: false,
            world: WorldSpec::default(),
            data: DataConfig {
                seed: 0,
                n_train: 8192,
                n_val: 512,
                n_test: 512,
                compositional: false,
            },
            dino: DinoConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("{key}: cannot parse {v:?} as {}", std::any::type_name::<T>()))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

fn parse_list(key: &str, v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl RunConfig {
    pub fn for_task(task: Task) -> Self {
        RunConfig {
            task,
            ..RunConfig::default()
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        macro_rules! num {
            ($field:expr) => {
                $field = parse_num(key, v)?
            };
        }
        macro_rules! flag {
            ($field:expr) => {
                $field = parse_bool(key, v)?
            };
        }
        if let Some(rest) = key.strip_prefix("image.").or_else(|| key.strip_prefix("text.")) {
            let tower = if key.starts_with("image.") { &mut self.image } else { &mut self.text };
            match rest {
                "blocks" => num!(tower.blocks),
                "width" => num!(tower.width),
                "heads" => num!(tower.heads),
                "mlp_ratio" => num!(tower.mlp_ratio),
                "max_positions" => num!(tower.max_positions),
                "causal" => flag!(tower.causal),
                _ => return Err(format!("unknown key {key:?}")),
            }
            return Ok(());
        }
        match key {
            "task" => self.task = Task::parse(v).ok_or_else(|| format!("task: expected clip or dino, got {v:?}"))?,
            "seed" => num!(self.seed),
            "steps" => num!(self.steps),
            "batch_size" => num!(self.batch_size),
            "optimizer" => {
                self.optim.kind = OptimKind::parse(v).ok_or_else(|| format!("optimizer: expected sgd or adamw, got {v:?}"))?
            }
            "lr" => num!(self.optim.lr),
            "weight_decay" => num!(self.optim.weight_decay),
            "momentum" => num!(self.optim.momentum),
            "beta1" => num!(self.optim.beta1),
            "beta2" => num!(self.optim.beta2),
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(format!("lr_schedule: expected constant or cosine, got {v:?}")),
                }
            }
            "warmup_steps" => num!(self.warmup_steps),
            "eval_every" => num!(self.eval_every),
            "eval_size" => num!(self.eval_size),
            "knn_k" => num!(self.knn_k),
            "head" => self.head.kind = HeadKind::parse(v).ok_or_else(|| format!("head: unknown head kind {v:?}"))?,
            "replace_last_block" => flag!(self.replace_last_block),
            "bottleneck_dim" => num!(self.head.bottleneck_dim),
            "sparo.slots" => num!(self.head.sparo.slots),
            "sparo.slot_dim" => num!(self.head.sparo.slot_dim),
            "sparo.attn_dim" => num!(self.head.sparo.attn_dim),
            "sparo.grp_size" => num!(self.head.sparo.grp_size),
            "sparo.bias" => flag!(self.head.sparo.use_bias),
            "attpool.cross" => {
                self.head.attpool.cross = match v {
                    "multi_head" => CrossKind::MultiHead,
                    "separate_head" => CrossKind::SeparateHead,
                    _ => return Err(format!("attpool.cross: expected multi_head or separate_head, got {v:?}")),
                }
            }
            "attpool.queries" => num!(self.head.attpool.queries),
            "attpool.heads" => num!(self.head.attpool.heads),
            "attpool.slots" => num!(self.head.attpool.slots),
            "attpool.slot_dim" => num!(self.head.attpool.slot_dim),
            "attpool.attn_dim" => num!(self.head.attpool.attn_dim),
            "attpool.slotwise_ln" => flag!(self.head.attpool.slotwise_ln),
            "attpool.slotwise_proj" => flag!(self.head.attpool.slotwise_proj),
            "world.num_factors" => num!(self.world.num_factors),
            "world.values_per_factor" => num!(self.world.values_per_factor),
            "world.shared_factors" => self.world.shared_factors = parse_list(key, v)?,
            "world.nuisance_per_view" => num!(self.world.nuisance_per_view),
            "world.seq_len_min" => num!(self.world.seq_len_min),
            "world.seq_len_max" => num!(self.world.seq_len_max),
            "world.embed_dim" => num!(self.world.embed_dim),
            "world.vocab" => num!(self.world.vocab),
            "world.noise" => num!(self.world.noise),
            "world.seed" => num!(self.world.world_seed),
            "data.seed" => num!(self.data.seed),
            "data.n_train" => num!(self.data.n_train),
            "data.n_val" => num!(self.data.n_val),
            "data.n_test" => num!(self.data.n_test),
            "data.compositional" => flag!(self.data.compositional),
            "dino.prototypes" => num!(self.dino.prototypes),
            "dino.hidden_dim" => num!(self.dino.hidden_dim),
            "dino.bottleneck_dim" => num!(self.dino.bottleneck_dim),
            "dino.tau_student" => num!(self.dino.tau_student),
            "dino.tau_teacher" => num!(self.dino.tau_teacher),
            "dino.momentum" => num!(self.dino.momentum),
            "dino.center_momentum" => num!(self.dino.center_momentum),
            "dino.token_dropout" => num!(self.dino.token_dropout),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its current value, in documentation order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("task", self.task.name().into());
        push("seed", self.seed.to_string());
        push("steps", self.steps.to_string());
        push("batch_size", self.batch_size.to_string());
        push("optimizer", self.optim.kind.name().into());
        push("lr", self.optim.lr.to_string());
        push("weight_decay", self.optim.weight_decay.to_string());
        push("momentum", self.optim.momentum.to_string());
        push("beta1", self.optim.beta1.to_string());
        push("beta2", self.optim.beta2.to_string());
        push(
            "lr_schedule",
            match self.lr_schedule {
                LrSchedule::Constant => "constant".into(),
                LrSchedule::Cosine => "cosine".into(),
            },
        );
        push("warmup_steps", self.warmup_steps.to_string());
        push("eval_every", self.eval_every.to_string());
        push("eval_size", self.eval_size.to_string());
        push("knn_k", self.knn_k.to_string());
        for (name, t) in [("image", &self.image), ("text", &self.text)] {
            push(&format!("{name}.blocks"), t.blocks.to_string());
            push(&format!("{name}.width"), t.width.to_string());
            push(&format!("{name}.heads"), t.heads.to_string());
            push(&format!("{name}.mlp_ratio"), t.mlp_ratio.to_string());
            push(&format!("{name}.max_positions"), t.max_positions.to_string());
            push(&format!("{name}.causal"), t.causal.to_string());
        }
        push("head", self.head.kind.name().into());
        push("replace_last_block", self.replace_last_block.to_string());
        push("bottleneck_dim", self.head.bottleneck_dim.to_string());
        let s = &self.head.sparo;
        push("sparo.slots", s.slots.to_string());
        push("sparo.slot_dim", s.slot_dim.to_string());
        push("sparo.attn_dim", s.attn_dim.to_string());
        push("sparo.grp_size", s.grp_size.to_string());
        push("sparo.bias", s.use_bias.to_string());
        let a = &self.head.attpool;
        push(
            "attpool.cross",
            match a.cross {
                CrossKind::MultiHead => "multi_head".into(),
                CrossKind::SeparateHead => "separate_head".into(),
            },
        );
        push("attpool.queries", a.queries.to_string());
        push("attpool.heads", a.heads.to_string());
        push("attpool.slots", a.slots.to_string());
        push("attpool.slot_dim", a.slot_dim.to_string());
        push("attpool.attn_dim", a.attn_dim.to_string());
        push("attpool.slotwise_ln", a.slotwise_ln.to_string());
        push("attpool.slotwise_proj", a.slotwise_proj.to_string());
        let w = &self.world;
        push("world.num_factors", w.num_factors.to_string());
        push("world.values_per_factor", w.values_per_factor.to_string());
        push(
            "world.shared_factors",
            w.shared_factors.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(","),
        );
        push("world.nuisance_per_view", w.nuisance_per_view.to_string());
        push("world.seq_len_min", w.seq_len_min.to_string());
        push("world.seq_len_max", w.seq_len_max.to_string());
        push("world.embed_dim", w.embed_dim.to_string());
        push("world.vocab", w.vocab.to_string());
        push("world.noise", w.noise.to_string());
        push("world.seed", w.world_seed.to_string());
        let d = &self.data;
        push("data.seed", d.seed.to_string());
        push("data.n_train", d.n_train.to_string());
        push("data.n_val", d.n_val.to_string());
        push("data.n_test", d.n_test.to_string());
        push("data.compositional", d.compositional.to_string());
        let g = &self.dino;
        push("dino.prototypes", g.prototypes.to_string());
        push("dino.hidden_dim", g.hidden_dim.to_string());
        push("dino.bottleneck_dim", g.bottleneck_dim.to_string());
        push("dino.tau_student", g.tau_student.to_string());
        push("dino.tau_teacher", g.tau_teacher.to_string());
        push("dino.momentum", g.momentum.to_string());
        push("dino.center_momentum", g.center_momentum.to_string());
        push("dino.token_dropout", g.token_dropout.to_string());
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses `text` on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut errs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v.trim()) {
                        errs.push(format!("line {}: {e}", n + 1));
                    }
                }
                None => errs.push(format!("line {}: expected `key = value`, got {line:?}", n + 1)),
            }
        }
        cfg.validate_into(&mut errs);
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn image_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            backbone: self.image.backbone(InputKind::Continuous {
                dim: self.world.embed_dim,
            }),
            head: self.head.clone(),
            replace_last_block: self.replace_last_block,
        }
    }

    pub fn text_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            backbone: self.text.backbone(InputKind::Tokens { vocab: self.world.vocab }),
            head: self.head.clone(),
            replace_last_block: self.replace_last_block,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.validate_into(&mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn validate_into(&self, errs: &mut Vec<String>) {
        self.world.validate("world.", errs);
        self.image_encoder().validate("image.", errs);
        if self.task == Task::Clip {
            let mut text_errs = Vec::new();
            self.text_encoder().validate("text.", &mut text_errs);
            // head errors are shared by both towers; report them once
            for e in text_errs {
                if !errs.contains(&e) {
                    errs.push(e);
                }
            }
        }
        let need = self.world.max_positions();
        if self.image.max_positions < need {
            errs.push(format!(
                "image.max_positions {} is below the longest view-A sequence {need} (world.seq_len_max + CLS)",
                self.image.max_positions
            ));
        }
        if self.task == Task::Clip && self.text.max_positions < need {
            errs.push(format!(
                "text.max_positions {} is below the longest view-B sequence {need} (world.seq_len_max + EOS)",
                self.text.max_positions
            ));
        }
        match self.task {
            Task::Clip if self.batch_size < 2 => errs.push(format!("batch_size must be >= 2 (got {})", self.batch_size)),
            Task::Dino if self.batch_size < 1 => errs.push("batch_size must be >= 1".into()),
            _ => {}
        }
        if self.task == Task::Dino {
            if !matches!(self.head.kind, HeadKind::Sparo | HeadKind::ClsEos) {
                errs.push(format!(
                    "head {} is not supported by task dino (use sparo or cls_eos)",
                    self.head.kind.name()
                ));
            }
            self.dino.validate("dino.", errs);
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            errs.push(format!("lr must be positive (got {})", o.lr));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            errs.push("weight_decay must be >= 0".into());
        }
        for (name, v) in [("momentum", o.momentum), ("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&v) {
                errs.push(format!("{name} must lie in [0, 1) (got {v})"));
            }
        }
        if self.eval_every == 0 {
            errs.push("eval_every must be >= 1".into());
        }
        let d = &self.data;
        for (name, v) in [("data.n_train", d.n_train), ("data.n_val", d.n_val), ("data.n_test", d.n_test)] {
            if v == 0 {
                errs.push(format!("{name} must be >= 1"));
            }
        }
        if d.seed >= 1 << 32 {
            errs.push("data.seed must be < 2^32".into());
        }
        if d.compositional && (self.world.num_factors < 2 || self.world.values_per_factor < 2) {
            errs.push("data.compositional needs at least 2 factors with at least 2 values each".into());
        }
        if self.eval_size == 0 || self.eval_size > d.n_val {
            errs.push(format!("eval_size must lie in [1, data.n_val = {}]", d.n_val));
        }
        if self.knn_k == 0 || self.knn_k > d.n_train {
            errs.push(format!("knn_k must lie in [1, data.n_train = {}]", d.n_train));
        }
        if self.batch_size > d.n_train {
            errs.push(format!("batch_size {} exceeds data.n_train {}", self.batch_size, d.n_train));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip_through_text() {
        for task in [Task::Clip, Task::Dino] {
            let cfg = RunConfig::for_task(task);
            cfg.validate().unwrap();
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn every_listed_key_is_settable() {
        let mut cfg = RunConfig::default();
        for (k, v) in RunConfig::default().entries() {
            cfg.set(&k, &v).unwrap_or_else(|e| panic!("{e}"));
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::parse("# toy\n\nsteps = 5\nsparo.slots=4\nworld.shared_factors = 0, 2\n").unwrap();
        assert_eq!(cfg.steps, 5);
        assert_eq!(cfg.head.sparo.slots, 4);
        assert_eq!(cfg.world.shared_factors, vec![0, 2]);
    }

    #[test]
    fn all_violations_reported_together() {
        let text = "bogus = 1\nsteps = many\nimage.heads = 5\nsparo.grp_size = 3\nimage.max_positions = 4\n";
        let Err(Error::Config(errs)) = RunConfig::parse(text) else {
            panic!("expected config error")
        };
        let joined = errs.join("\n");
        for needle in ["bogus", "steps", "image.width 32 must be divisible by heads 5", "grp_size 3", "image.max_positions"] {
            assert!(joined.contains(needle), "{needle} missing from\n{joined}");
        }
        assert_eq!(joined.matches("grp_size").count(), 1, "{joined}");
    }
}
