//! Subcommand implementations and run-directory conventions.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.resolved.toml   manifest.json
//! data/       videos.jsonl train.jsonl test.jsonl video_drops.jsonl pair_drops.jsonl
//! checkpoints/ sft.json grpo.json editor.json
//! metrics/    sft.csv grpo.csv editor.csv
//! reports/    funnel.json eval.json table.csv ablation.json edit.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, OracleKind, RunConfig};
use crate::corpus::{
    generate_videos, mine_corpus, read_jsonl, write_jsonl, CorpusError, MiningOracles, MockJudges, MockTutorialOracle,
    PairRecord, VideoRecord,
};
use crate::eval::{
    attach_human_study, evaluate, write_table_csv, DistanceJudge, EvalContext, EvalError, EvalItem, EvalReport,
    JudgeOracle,
};
use crate::flow::{load_editor, sample_ode, save_editor, train_editor, EditorExample, FlowError, VelocityNet};
use crate::grammar::{hex_digest, PlanRecord, TokenId};
use crate::grpo::{train_grpo, GrpoError, GrpoPrompt};
use crate::policy::{PolicyConfig, PolicyError, PolicyParams};
use crate::reward::{MockRewardOracle, OracleError, RemoteRewardOracle, RewardOracle};
use crate::rng;
use crate::sft::{train_sft, SftError, SftExample};
use crate::world::{l2, World, WorldError};
use crate::PromptId;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    OracleUnavailable(OracleError),
    #[error("missing input {path}: run `{hint}` first")]
    MissingInput { path: PathBuf, hint: &'static str },
    #[error("bad input: {0}")]
    BadInput(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error(transparent)]
    Grpo(GrpoError),
    #[error(transparent)]
    Flow(FlowError),
    #[error(transparent)]
    Eval(EvalError),
    #[error(transparent)]
    Policy(PolicyError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl RunError {
    /// 0 success, 1 other failure, 2 invalid config, 3 checkpoint problem,
    /// 4 oracle unavailable.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::CheckpointMismatch(_) => 3,
            RunError::OracleUnavailable(_) => 4,
            _ => 1,
        }
    }
}

impl From<GrpoError> for RunError {
    fn from(e: GrpoError) -> Self {
        match e {
            GrpoError::Oracle(o @ OracleError::Unavailable(_)) => RunError::OracleUnavailable(o),
            GrpoError::BadConfig(m) => RunError::Config(ConfigError::Invalid(m)),
            other => RunError::Grpo(other),
        }
    }
}

impl From<PolicyError> for RunError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::VocabMismatch { .. } | PolicyError::UnsupportedVersion(_) => {
                RunError::CheckpointMismatch(e.to_string())
            }
            other => RunError::Policy(other),
        }
    }
}

impl From<FlowError> for RunError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::CheckpointMismatch(m) => RunError::CheckpointMismatch(m),
            FlowError::BadConfig(m) => RunError::Config(ConfigError::Invalid(m)),
            other => RunError::Flow(other),
        }
    }
}

impl From<EvalError> for RunError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Flow(f) => f.into(),
            other => RunError::Eval(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub config_hash: String,
    pub sha256: String,
}

/// Every artifact path (relative to the run directory) with the config hash
/// and command that produced it.
pub type Manifest = BTreeMap<String, ManifestEntry>;

/// A resolved config bound to its run directory.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub hash: String,
    pub world: World,
    quiet: bool,
}

impl Run {
    /// Resolves seeds, validates, creates the run directory and writes
    /// `config.resolved.toml`.
    pub fn open(mut config: RunConfig, quiet: bool) -> Result<Self, RunError> {
        config.resolve_seeds();
        config.validate()?;
        let hash = config.hash()?;
        let dir = config.out_dir.clone();
        for sub in ["data", "checkpoints", "metrics", "reports"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let resolved = dir.join("config.resolved.toml");
        fs::write(&resolved, config.to_toml()?).map_err(io_err(&resolved))?;
        let world = World::generate(config.lexicon.clone(), config.world.clone())?;
        Ok(Self {
            config,
            dir,
            hash,
            world,
            quiet,
        })
    }

    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[aesformer] {msg}");
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn fingerprint(&self) -> String {
        self.world.vocab.fingerprint()
    }

    /// Records `paths` in `manifest.json`.
    fn register(&self, command: &str, paths: &[&Path]) -> Result<(), RunError> {
        let mpath = self.path("manifest.json");
        let mut manifest: Manifest = match fs::read(&mpath) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(_) => Manifest::new(),
        };
        for p in paths {
            let bytes = fs::read(p).map_err(io_err(p))?;
            let rel = p
                .strip_prefix(&self.dir)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/");
            manifest.insert(
                rel,
                ManifestEntry {
                    command: command.to_string(),
                    config_hash: self.hash.clone(),
                    sha256: hex_digest(&Sha256::digest(&bytes)),
                },
            );
        }
        fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&mpath))?;
        Ok(())
    }

    fn require(&self, path: &Path, hint: &'static str) -> Result<(), RunError> {
        if path.exists() {
            Ok(())
        } else {
            Err(RunError::MissingInput {
                path: path.to_path_buf(),
                hint,
            })
        }
    }

    fn load_pairs(&self, path: &Path) -> Result<Vec<PairRecord>, RunError> {
        self.require(path, "mine-corpus")?;
        Ok(read_jsonl(path)?)
    }

    fn policy_config(&self) -> PolicyConfig {
        let p = &self.config.policy;
        PolicyConfig {
            vocab_size: self.world.vocab.len(),
            temperature: p.temperature,
            bucket_width: p.bucket_width,
            max_len: p.max_len,
            end_token: Some(self.world.vocab.end_token()),
        }
    }

    fn load_policy(&self, path: &Path) -> Result<PolicyParams, RunError> {
        if !path.exists() {
            return Err(RunError::CheckpointMismatch(format!("{} not found", path.display())));
        }
        Ok(PolicyParams::load(path, &self.fingerprint())?)
    }

    /// The GRPO checkpoint when present, else the SFT one.
    fn latest_policy(&self) -> Result<PolicyParams, RunError> {
        let grpo = self.path("checkpoints/grpo.json");
        if grpo.exists() {
            self.load_policy(&grpo)
        } else {
            self.load_policy(&self.path("checkpoints/sft.json"))
        }
    }

    fn load_trained_editor(&self) -> Result<(VelocityNet, crate::flow::ConditionEncoder), RunError> {
        let p = self.path("checkpoints/editor.json");
        if !p.exists() {
            return Err(RunError::CheckpointMismatch(format!("{} not found", p.display())));
        }
        let (net, enc) = load_editor(&p, &self.fingerprint())?;
        if net.latent_dim() != self.world.latent_dim() {
            return Err(RunError::CheckpointMismatch(
                "editor latent size differs from the world".into(),
            ));
        }
        Ok((net, enc))
    }

    fn plan_tokens(&self, pair: &PairRecord) -> Result<Vec<TokenId>, RunError> {
        let rec = pair
            .actions
            .as_ref()
            .ok_or_else(|| RunError::BadInput(format!("pair {} has no action plan", pair.pair_id)))?;
        rec.to_tokens(&self.world.vocab)
            .map_err(|e| RunError::BadInput(format!("pair {}: {e}", pair.pair_id)))
    }

    fn eval_items(&self) -> Result<Vec<EvalItem>, RunError> {
        let test = self.load_pairs(&self.path("data/test.jsonl"))?;
        test.iter()
            .map(|p| {
                let prof = self
                    .world
                    .profile(p.scene)
                    .ok_or_else(|| RunError::BadInput(format!("pair {} has unknown scene {}", p.pair_id, p.scene)))?;
                Ok(EvalItem {
                    context: EvalContext {
                        prompt: p.scene,
                        target: prof.target_latent.clone(),
                    },
                    poor: p.poor.frame.features.clone(),
                    good: p.good.frame.features.clone(),
                })
            })
            .collect()
    }
}

pub fn gen_videos(run: &Run, out: Option<PathBuf>) -> Result<PathBuf, RunError> {
    let out = out.unwrap_or_else(|| run.path("data/videos.jsonl"));
    let videos = generate_videos(&run.world, &run.config.generator)?;
    write_jsonl(&out, &videos)?;
    run.log(&format!("wrote {} videos to {}", videos.len(), out.display()));
    run.register("gen-videos", &[&out])?;
    Ok(out)
}

pub fn mine(
    run: &Run,
    input: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> Result<crate::corpus::FunnelReport, RunError> {
    let input = input.unwrap_or_else(|| run.path("data/videos.jsonl"));
    run.require(&input, "gen-videos")?;
    let videos: Vec<VideoRecord> = read_jsonl(&input)?;
    let judges = MockJudges;
    let tutor = MockTutorialOracle::new(run.world.clone());
    let oracles = MiningOracles::mock(&judges, &tutor);
    let res = mine_corpus(videos, &oracles, &run.config.mining, &run.world.vocab)?;
    let data = out_dir.unwrap_or_else(|| run.path("data"));
    fs::create_dir_all(&data).map_err(io_err(&data))?;
    let train = data.join("train.jsonl");
    let test = data.join("test.jsonl");
    let vdrops = data.join("video_drops.jsonl");
    let pdrops = data.join("pair_drops.jsonl");
    write_jsonl(&train, &res.train)?;
    write_jsonl(&test, &res.test)?;
    write_jsonl(&vdrops, &res.video_drops)?;
    write_jsonl(&pdrops, &res.pair_drops)?;
    let funnel = run.path("reports/funnel.json");
    fs::write(&funnel, serde_json::to_vec_pretty(&res.report)?).map_err(io_err(&funnel))?;
    let r = &res.report;
    run.log(&format!(
        "videos {} -> {} kept; pairs {} coarse -> {} final ({} train / {} test)",
        r.videos_in, r.videos_kept, r.coarse_pairs, r.final_pairs, r.train, r.test
    ));
    run.register("mine-corpus", &[&train, &test, &vdrops, &pdrops, &funnel])?;
    Ok(res.report)
}

pub fn train_sft_cmd(run: &Run) -> Result<f64, RunError> {
    let train = run.load_pairs(&run.path("data/train.jsonl"))?;
    let examples = train
        .iter()
        .map(|p| {
            Ok(SftExample {
                prompt: p.scene,
                target: run.plan_tokens(p)?,
            })
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    let mut params = PolicyParams::uniform(run.policy_config())?;
    let prompts: Vec<PromptId> = run.world.profiles().iter().map(|p| p.id).collect();
    let rows = train_sft(&mut params, &examples, &run.world.vocab, &run.config.sft, &prompts)?;

    let ckpt = run.path("checkpoints/sft.json");
    params.save(&ckpt, &run.fingerprint())?;
    let metrics = run.path("metrics/sft.csv");
    let mut w = csv::Writer::from_path(&metrics)?;
    w.write_record(["step", "loss_mean_seq_nll", "lr", "format_validity"])?;
    for r in &rows {
        w.write_record([
            r.step.to_string(),
            r.loss_mean_seq_nll.to_string(),
            r.lr.to_string(),
            r.format_validity.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(io_err(&metrics))?;
    let last = rows.last().map_or(f64::NAN, |r| r.loss_mean_seq_nll);
    run.log(&format!("sft: {} steps, final batch NLL {last:.5}", rows.len()));
    run.register("train-sft", &[&ckpt, &metrics])?;
    Ok(last)
}

fn reward_oracle(run: &Run) -> Box<dyn RewardOracle> {
    match run.config.oracle.kind {
        OracleKind::Mock => Box::new(MockRewardOracle::from_world(&run.world)),
        OracleKind::Remote => Box::new(RemoteRewardOracle::new(
            run.config.oracle.remote.clone(),
            run.world.vocab.clone(),
        )),
    }
}

pub fn train_grpo_cmd(run: &Run) -> Result<f64, RunError> {
    let reference = run.load_policy(&run.path("checkpoints/sft.json"))?;
    let train = run.load_pairs(&run.path("data/train.jsonl"))?;
    let prompts = train
        .iter()
        .map(|p| {
            let rec = p
                .actions
                .as_ref()
                .ok_or_else(|| RunError::BadInput(format!("pair {} has no plan", p.pair_id)))?;
            let reference = rec
                .to_plan(&run.world.vocab)
                .map_err(|e| RunError::BadInput(format!("pair {}: {e}", p.pair_id)))?;
            Ok(GrpoPrompt {
                prompt: p.scene,
                reference,
            })
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    let oracle = reward_oracle(run);
    let mut params = reference.clone();
    let cfg = &run.config.grpo;
    let every = (cfg.steps / 10).max(1);
    let reports = train_grpo(
        &mut params,
        &reference,
        &prompts,
        oracle.as_ref(),
        &run.config.reward,
        cfg,
        &run.world.vocab,
        |r, _| {
            if r.step % every == 0 {
                run.log(&format!(
                    "grpo step {}: reward {:.4} kl {:.5} format {:.3}",
                    r.step, r.mean_reward, r.mean_kl, r.format_rate
                ));
            }
        },
    )?;
    let ckpt = run.path("checkpoints/grpo.json");
    params.save(&ckpt, &run.fingerprint())?;
    let metrics = run.path("metrics/grpo.csv");
    let mut w = csv::Writer::from_path(&metrics)?;
    w.write_record([
        "step",
        "prompt",
        "mean_reward",
        "format_rate",
        "mean_alignment",
        "mean_creativity",
        "mean_kl",
        "objective",
        "grad_norm",
        "mean_len",
    ])?;
    for r in &reports {
        w.write_record([
            r.step.to_string(),
            r.prompt.to_string(),
            r.mean_reward.to_string(),
            r.format_rate.to_string(),
            r.mean_alignment.to_string(),
            r.mean_creativity.to_string(),
            r.mean_kl.to_string(),
            r.objective.to_string(),
            r.grad_norm.to_string(),
            r.mean_len.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&metrics))?;
    run.register("train-grpo", &[&ckpt, &metrics])?;
    let tail: Vec<f64> = reports.iter().rev().take(50).map(|r| r.mean_reward).collect();
    Ok(crate::stats::mean(&tail))
}

pub fn train_editor_cmd(run: &Run) -> Result<f64, RunError> {
    let train = run.load_pairs(&run.path("data/train.jsonl"))?;
    let enc = &run.config.editor.encoder;
    let data = train
        .iter()
        .map(|p| {
            Ok(EditorExample::new(
                p.scene,
                run.plan_tokens(p)?,
                p.good.frame.features.clone(),
                enc,
                &run.world.vocab,
            ))
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    let cfg = &run.config.editor;
    let mut net = VelocityNet::new(cfg.net.clone())?;
    let every = (cfg.steps / 10).max(1);
    let losses = train_editor(&mut net, &data, cfg, |step, loss| {
        if step % every == 0 {
            run.log(&format!("editor step {step}: loss {loss:.5}"));
        }
    })?;
    let ckpt = run.path("checkpoints/editor.json");
    save_editor(&ckpt, &net, enc, &run.fingerprint())?;
    let metrics = run.path("metrics/editor.csv");
    let mut w = csv::Writer::from_path(&metrics)?;
    w.write_record(["step", "fm_loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(io_err(&metrics))?;
    run.register("train-editor", &[&ckpt, &metrics])?;
    Ok(losses.last().copied().unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutput {
    pub prompt: PromptId,
    pub plan: String,
    pub plan_valid: bool,
    pub latent: Vec<f64>,
    pub nearest_target: PromptId,
    pub nearest_distance: f64,
    pub distance_to_prompt_target: f64,
}

/// Reads a plan as either the token line form or a JSON segment list.
pub fn read_plan_file(path: &Path, run: &Run) -> Result<Vec<TokenId>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        let rec: PlanRecord = serde_json::from_str(trimmed)?;
        rec.to_tokens(&run.world.vocab)
            .map_err(|e| RunError::BadInput(e.to_string()))
    } else {
        run.world
            .vocab
            .encode_line(trimmed)
            .map_err(|e| RunError::BadInput(e.to_string()))
    }
}

pub fn edit(run: &Run, prompt: PromptId, plan: Option<PathBuf>, out: Option<PathBuf>) -> Result<EditOutput, RunError> {
    let prof = run
        .world
        .profile(prompt)
        .ok_or_else(|| RunError::BadInput(format!("prompt {prompt} is not a known scene")))?;
    let tokens = match plan {
        Some(p) => read_plan_file(&p, run)?,
        None => {
            let policy = run.latest_policy()?;
            policy.greedy_decode(prompt, policy.config().max_len)
        }
    };
    let (net, enc) = run.load_trained_editor()?;
    let h = enc.encode(prompt, &tokens, &run.world.vocab);
    let mut r = rng::stream(run.config.eval.seed, "edit/ode", u64::from(prompt.0));
    let latent = sample_ode(&net, &h, run.config.eval.ode_steps, &mut r)?;
    let (nearest_target, nearest_distance) = run.world.nearest_target(&latent);
    let output = EditOutput {
        prompt,
        plan: run.world.vocab.render(&tokens),
        plan_valid: crate::grammar::format_reward(&tokens, &run.world.vocab) == 1,
        distance_to_prompt_target: l2(&latent, &prof.target_latent),
        latent,
        nearest_target,
        nearest_distance,
    };
    let out = out.unwrap_or_else(|| run.path("reports/edit.json"));
    fs::write(&out, serde_json::to_vec_pretty(&output)?).map_err(io_err(&out))?;
    run.register("edit", &[&out])?;
    Ok(output)
}

fn panel() -> (DistanceJudge, Vec<DistanceJudge>) {
    (DistanceJudge::new("distance_judge", 1.0), DistanceJudge::scorer_panel())
}

pub fn evaluate_cmd(run: &Run, human: Option<PathBuf>) -> Result<Vec<EvalReport>, RunError> {
    let items = run.eval_items()?;
    let policy = run.latest_policy()?;
    let (trained, enc) = run.load_trained_editor()?;
    let untrained = VelocityNet::new(run.config.editor.net.clone())?;
    let (judge, scorers) = panel();
    let scorer_refs: Vec<&dyn JudgeOracle> = scorers.iter().map(|s| s as &dyn JudgeOracle).collect();
    let mut reports = Vec::new();
    for (label, net) in [("trained-editor", &trained), ("untrained-editor", &untrained)] {
        let (report, _) = evaluate(
            label,
            &items,
            &policy,
            net,
            &enc,
            &run.world.vocab,
            &judge,
            &scorer_refs,
            &run.config.eval,
            false,
        )?;
        run.log(&format!(
            "{label}: win vs poor {:.3}, win vs good {:.3} over {} items",
            report.win_rate_vs_poor, report.win_rate_vs_good, report.samples
        ));
        reports.push(report);
    }
    if let Some(h) = human {
        attach_human_study(&mut reports, &h)?;
    }
    let json = run.path("reports/eval.json");
    fs::write(&json, serde_json::to_vec_pretty(&reports)?).map_err(io_err(&json))?;
    let table = run.path("reports/table.csv");
    write_table_csv(&reports, &table)?;
    run.register("evaluate", &[&json, &table])?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ordered: EvalReport,
    pub shuffled: EvalReport,
    /// ordered minus shuffled
    pub delta_win_vs_poor: f64,
    pub delta_win_vs_good: f64,
}

pub fn ablate_shuffle(run: &Run) -> Result<AblationReport, RunError> {
    let items = run.eval_items()?;
    let policy = run.latest_policy()?;
    let (net, enc) = run.load_trained_editor()?;
    let (judge, scorers) = panel();
    let scorer_refs: Vec<&dyn JudgeOracle> = scorers.iter().map(|s| s as &dyn JudgeOracle).collect();
    let go = |label: &str, shuffle: bool| {
        evaluate(
            label,
            &items,
            &policy,
            &net,
            &enc,
            &run.world.vocab,
            &judge,
            &scorer_refs,
            &run.config.eval,
            shuffle,
        )
        .map(|(r, _)| r)
    };
    let ordered = go("ordered", false)?;
    let shuffled = go("shuffled", true)?;
    let report = AblationReport {
        delta_win_vs_poor: ordered.win_rate_vs_poor - shuffled.win_rate_vs_poor,
        delta_win_vs_good: ordered.win_rate_vs_good - shuffled.win_rate_vs_good,
        ordered,
        shuffled,
    };
    run.log(&format!(
        "shuffle ablation: win vs poor {:.3} -> {:.3}, win vs good {:.3} -> {:.3}",
        report.ordered.win_rate_vs_poor,
        report.shuffled.win_rate_vs_poor,
        report.ordered.win_rate_vs_good,
        report.shuffled.win_rate_vs_good
    ));
    let out = run.path("reports/ablation.json");
    fs::write(&out, serde_json::to_vec_pretty(&report)?).map_err(io_err(&out))?;
    run.register("ablate-shuffle", &[&out])?;
    Ok(report)
}
