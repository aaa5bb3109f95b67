//! File-level entry points shared by the command-line tool and the tests.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{
    run_ablation, run_attack, surrogate_loss, AblationMode, AttackConfig, AttackOutcome,
    IterationRecord,
};
use crate::detector::{default_zoo, zoo_specs, Detector, DetectorSpec, GridDetector, Selection};
use crate::error::{Error, Result};
use crate::eval::{
    compare_prompts, evaluate_zoo, prompts_csv, EvalReport, PromptRow, DEFAULT_PROMPTS,
};
use crate::image::{Image, PatchImage};
use crate::patching::generate_scenes_for;
use crate::tensor::{write_complex, write_tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 32,
            height: 128,
            width: 128,
        }
    }
}

impl SceneConfig {
    pub fn generate(&self, zoo: &[GridDetector]) -> Result<Vec<Image>> {
        Ok(
            generate_scenes_for(self.seed, self.count, self.height, self.width, zoo)?
                .into_iter()
                .map(|s| s.image)
                .collect(),
        )
    }
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub attack: AttackConfig,
    /// Scenes the patch is optimised on.
    pub scenes: SceneConfig,
    /// Held-out scenes for mAP evaluation.
    pub eval_scenes: SceneConfig,
    pub zoo_seed: u64,
    pub surrogate: String,
    /// Prompts compared by the `prompts` command.
    pub prompts: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            scenes: SceneConfig::default(),
            eval_scenes: SceneConfig {
                seed: 1,
                ..SceneConfig::default()
            },
            zoo_seed: 0,
            surrogate: "det0".into(),
            prompts: DEFAULT_PROMPTS.iter().map(|p| p.to_string()).collect(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg: RunConfig = serde_json::from_slice(&fs::read(path)?)?;
        cfg.attack.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn zoo(&self) -> Vec<GridDetector> {
        default_zoo(self.zoo_seed)
    }

    pub fn surrogate<'a>(&self, zoo: &'a [GridDetector]) -> Result<&'a GridDetector> {
        zoo.iter()
            .find(|d| d.id() == self.surrogate)
            .ok_or_else(|| Error::MissingSurrogate(self.surrogate.clone()))
    }
}

/// `epoch,batch,iter,loss` with shortest round-trip floats.
pub fn loss_history_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from("epoch,batch,iter,loss\n");
    for r in records {
        writeln!(out, "{},{},{},{}", r.epoch, r.batch, r.iter, r.loss)
            .expect("writing to a string");
    }
    out
}

/// Runs the attack and writes `tau.ppm`, `freq.re`, `freq.im`,
/// `phi_T.tensor`, `loss_history.csv`, `run_config.json` and `log.txt`.
pub fn attack_to_dir(cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<AttackOutcome> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    cfg.save(out_dir.join("run_config.json"))?;
    let zoo = cfg.zoo();
    let scenes = cfg.scenes.generate(&zoo)?;
    let outcome = run_attack(&cfg.attack, cfg.surrogate(&zoo)?, &scenes)?;
    outcome.tau.write_ppm(out_dir.join("tau.ppm"))?;
    write_complex(out_dir.join("freq"), &outcome.state.freq)?;
    write_tensor(
        out_dir.join("phi_T.tensor"),
        &outcome.state.phi_t.to_tensor(),
    )?;
    fs::write(
        out_dir.join("loss_history.csv"),
        loss_history_csv(&outcome.records),
    )?;
    let mut log = outcome.log.join("\n");
    if !log.is_empty() {
        log.push('\n');
    }
    fs::write(out_dir.join("log.txt"), log)?;
    Ok(outcome)
}

/// One ablation mode's outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub final_loss: f64,
    pub surrogate_map: f64,
    pub blackbox_avg: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("mode,final_loss,surrogate_map,blackbox_avg\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.9},{:.6},{:.6}",
            r.mode.name(),
            r.final_loss,
            r.surrogate_map,
            r.blackbox_avg
        )
        .expect("writing to a string");
    }
    out
}

/// Runs all four ablation modes; writes `ablation.csv`, `tau_<mode>.ppm`
/// and `run_config.json`.
pub fn ablate_to_dir(cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<Vec<AblationRow>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    cfg.save(out_dir.join("run_config.json"))?;
    let zoo = cfg.zoo();
    let surrogate = cfg.surrogate(&zoo)?;
    let scenes = cfg.scenes.generate(&zoo)?;
    let eval_scenes = cfg.eval_scenes.generate(&zoo)?;
    let mut rows = Vec::new();
    for mode in AblationMode::ALL {
        let out = run_ablation(&cfg.attack, surrogate, &scenes, mode)?;
        out.tau
            .write_ppm(out_dir.join(format!("tau_{}.ppm", mode.name())))?;
        let final_loss = surrogate_loss(
            surrogate,
            &scenes,
            &out.tau,
            cfg.attack.train_scale,
            Selection::Nms,
            cfg.attack
                .restrict_to_target
                .then_some(crate::detector::TARGET_CLASS),
        )?;
        let report = evaluate_zoo(
            &zoo,
            &cfg.surrogate,
            &eval_scenes,
            &out.tau,
            cfg.attack.test_scale,
            mode.name(),
            serde_json::Value::Null,
        )?;
        rows.push(AblationRow {
            mode,
            final_loss,
            surrogate_map: report.map_of(&cfg.surrogate).expect("surrogate in zoo"),
            blackbox_avg: report.blackbox_avg,
        });
    }
    fs::write(out_dir.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

/// Evaluation request of the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub patch: String,
    pub zoo_seed: u64,
    pub scenes: SceneConfig,
    pub test_scale: f64,
    pub surrogate: String,
}

/// Evaluates a patch file on the zoo; writes `report.csv`, `report.json`
/// and `run_config.json` into `out_dir`.
pub fn eval_to_dir(req: &EvalRequest, out_dir: impl AsRef<Path>) -> Result<EvalReport> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut text = serde_json::to_vec_pretty(req)?;
    text.push(b'\n');
    fs::write(out_dir.join("run_config.json"), text)?;
    let tau: PatchImage = Image::load(&req.patch)?;
    let zoo = default_zoo(req.zoo_seed);
    let scenes = req.scenes.generate(&zoo)?;
    let report = evaluate_zoo(
        &zoo,
        &req.surrogate,
        &scenes,
        &tau,
        req.test_scale,
        &req.patch,
        serde_json::to_value(req)?,
    )?;
    crate::eval::write_report(&report, out_dir.join("report.csv"))?;
    Ok(report)
}

/// Runs the prompt comparison; writes `prompts.csv` and `run_config.json`.
pub fn prompts_to_dir(cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<Vec<PromptRow>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    cfg.save(out_dir.join("run_config.json"))?;
    let zoo = cfg.zoo();
    let scenes = cfg.scenes.generate(&zoo)?;
    let eval_scenes = cfg.eval_scenes.generate(&zoo)?;
    let configs: Vec<AttackConfig> = cfg
        .prompts
        .iter()
        .map(|p| AttackConfig {
            prompt: p.clone(),
            ..cfg.attack.clone()
        })
        .collect();
    let rows = compare_prompts(&configs, &zoo, &cfg.surrogate, &scenes, &eval_scenes)?;
    fs::write(out_dir.join("prompts.csv"), prompts_csv(&rows))?;
    Ok(rows)
}

pub fn zoo_list(seed: u64) -> Vec<DetectorSpec> {
    zoo_specs(seed)
}
