//! `embaudit` command-line front end.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use embedding_audit::dataset::{
    join, load_features, load_metadata, save_features, save_metadata, Dataset, FeatureFormat,
    FeatureMatrix, MediaType,
};
use embedding_audit::error::Error;
use embedding_audit::invariance::{
    compute_invariance_map, emit_heatmap, invariance_index, rank_invariant_identities,
    ConditionKind, ConditionSpec, InvarianceConfig, InvarianceMap,
};
use embedding_audit::plot;
use embedding_audit::probes::{
    run_probe, ModelKind, ProbeConfig, TargetKind, TargetSpec, TrainSize,
};
use embedding_audit::quality::{gallery_manifest, rank_by_center_distance, Center, Take};
use embedding_audit::stats::TTestKind;
use embedding_audit::synth::{generate, SynthSpec};
use embedding_audit::tsne::{embed, TsneConfig, TsneMode};
use embedding_audit::verification::{compare_invariant_vs_rest, Grouping, VerificationConfig};

pub const OUT_ENV: &str = "EMBAUDIT_OUT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "embaudit",
    version,
    about = "Audit face-recognition embeddings"
)]
pub struct Cli {
    /// Directory receiving every artifact and the manifest.
    #[arg(long, global = true, env = OUT_ENV, default_value = "embaudit-out")]
    pub out: PathBuf,
    /// Worker threads. Outputs are identical for any value.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Linear probes for pose and media type.
    Probe(ProbeArgs),
    /// Per-identity frontal/profile or still/video t-test map.
    Invariance(InvarianceArgs),
    /// Verification ROC of invariant identities against the rest.
    Verify(VerifyArgs),
    /// Rank items by distance from the feature-space center.
    Quality(QualityArgs),
    /// Two-dimensional t-SNE embedding.
    Tsne(TsneArgs),
    /// Generate a synthetic dataset with planted ground truth.
    Synth(SynthArgs),
    /// Convert a feature matrix between CSV and EMAT.
    Convert(ConvertArgs),
    /// Run probes, invariance, verification, quality and t-SNE in order.
    Audit(AuditArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Feature matrix (.csv or .emat).
    #[arg(long)]
    pub features: PathBuf,
    /// Metadata CSV.
    #[arg(long)]
    pub meta: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetArg {
    Yaw,
    Pitch,
    Media,
}

impl TargetArg {
    fn kind(self) -> TargetKind {
        match self {
            TargetArg::Yaw => TargetKind::YawAbsRegression,
            TargetArg::Pitch => TargetKind::PitchBandBinary,
            TargetArg::Media => TargetKind::MediaTypeBinary,
        }
    }

    fn name(self) -> &'static str {
        match self {
            TargetArg::Yaw => "yaw",
            TargetArg::Pitch => "pitch",
            TargetArg::Media => "media",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArg {
    Ls,
    Lda,
    BinnedLda,
}

fn parse_train_size(s: &str) -> Result<TrainSize, String> {
    if s == "auto" {
        return Ok(TrainSize::Auto);
    }
    if let Ok(k) = s.parse::<usize>() {
        return Ok(TrainSize::Count(k));
    }
    match s.parse::<f64>() {
        Ok(f) if f > 0.0 && f < 1.0 => Ok(TrainSize::Fraction(f)),
        _ => Err(format!(
            "expected `auto`, a count, or a fraction in (0, 1), got `{s}`"
        )),
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeKnobs {
    /// Random train/test splits.
    #[arg(long, default_value_t = 20)]
    pub iterations: usize,
    /// `auto`, an item count, or a fraction in (0, 1).
    #[arg(long, default_value = "auto", value_parser = parse_train_size)]
    pub train_size: TrainSize,
    #[arg(long, value_enum, default_value_t = ModelArg::Ls)]
    pub model: ModelArg,
    /// Bin width in degrees for `binned-lda`.
    #[arg(long, default_value_t = 10.0)]
    pub bin_width: f64,
    /// Ridge lambda, or LDA shrinkage.
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    /// Pitch interval labelled centered, as `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [-8.0, 8.0], allow_negative_numbers = true)]
    pub pitch_band: Vec<f64>,
}

impl ProbeKnobs {
    fn config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            iterations: self.iterations,
            train_size: self.train_size,
            seed,
            model: match self.model {
                ModelArg::Ls => ModelKind::LeastSquares,
                ModelArg::Lda => ModelKind::Lda,
                ModelArg::BinnedLda => ModelKind::BinnedLda {
                    bin_width: self.bin_width,
                },
            },
            lambda: self.lambda,
        }
    }

    fn target(&self, target: TargetArg) -> TargetSpec {
        TargetSpec {
            kind: target.kind(),
            pitch_band: [self.pitch_band[0], self.pitch_band[1]],
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub target: TargetArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub knobs: ProbeKnobs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionArg {
    FrontalProfile,
    StillVideo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestArg {
    Welch,
    Pooled,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InvarianceKnobs {
    #[arg(long, value_enum, default_value_t = ConditionArg::FrontalProfile)]
    pub condition: ConditionArg,
    /// Largest |yaw| counted as frontal.
    #[arg(long, default_value_t = 20.0)]
    pub frontal_max: f64,
    /// Smallest |yaw| counted as profile.
    #[arg(long, default_value_t = 60.0)]
    pub profile_min: f64,
    #[arg(long, default_value_t = 20)]
    pub min_per_group: usize,
    /// Family-wise alpha before Bonferroni correction.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = TestArg::Welch)]
    pub test: TestArg,
    /// Identities reported as most invariant.
    #[arg(long, default_value_t = 7)]
    pub k: usize,
}

impl InvarianceKnobs {
    fn condition(&self) -> Result<ConditionSpec, Error> {
        match self.condition {
            ConditionArg::FrontalProfile => ConditionSpec::new(ConditionKind::FrontalVsProfile)
                .with_yaw_thresholds(self.frontal_max, self.profile_min),
            ConditionArg::StillVideo => Ok(ConditionSpec::new(ConditionKind::StillVsVideo)),
        }
    }

    fn config(&self) -> InvarianceConfig {
        InvarianceConfig {
            min_per_group: self.min_per_group,
            alpha: self.alpha,
            test: match self.test {
                TestArg::Welch => TTestKind::Welch,
                TestArg::Pooled => TTestKind::Pooled,
            },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InvarianceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub knobs: InvarianceKnobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingArg {
    Subject,
    Template,
    Random,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyKnobs {
    /// How items are pooled into templates.
    #[arg(long, value_enum, default_value_t = GroupingArg::Template)]
    pub grouping: GroupingArg,
    /// Items per template for `--grouping random`.
    #[arg(long, default_value_t = 10)]
    pub template_size: usize,
    /// Impostor pairs kept per set.
    #[arg(long, default_value_t = 100_000)]
    pub impostor_cap: usize,
}

impl VerifyKnobs {
    fn config(&self, k: usize, seed: u64) -> VerificationConfig {
        VerificationConfig {
            k,
            grouping: match self.grouping {
                GroupingArg::Subject => Grouping::BySubject,
                GroupingArg::Template => Grouping::ByTemplateId,
                GroupingArg::Random => Grouping::RandomSplit {
                    size: self.template_size,
                    seed,
                },
            },
            impostor_cap: self.impostor_cap,
            seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub invariance: InvarianceKnobs,
    #[command(flatten)]
    #[serde(flatten)]
    pub knobs: VerifyKnobs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterArg {
    Origin,
    Centroid,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct QualityKnobs {
    #[arg(long, value_enum, default_value_t = CenterArg::Origin)]
    pub center: CenterArg,
    /// Items per gallery band.
    #[arg(long, default_value_t = 129)]
    pub count: usize,
    /// Size the closest-to-center head as a fraction of all items instead
    /// of `--count`.
    #[arg(long)]
    pub head_fraction: Option<f64>,
    /// Percentile bands, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [20.0, 50.0, 90.0])]
    pub percentiles: Vec<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct QualityArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub knobs: QualityKnobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TsneModeArg {
    Exact,
    BarnesHut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorArg {
    Subject,
    Media,
    None,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TsneKnobs {
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub tsne_iterations: usize,
    #[arg(long, default_value_t = 200.0)]
    pub learning_rate: f64,
    #[arg(long, value_enum, default_value_t = TsneModeArg::BarnesHut)]
    pub mode: TsneModeArg,
    /// Barnes-Hut opening angle.
    #[arg(long, default_value_t = 0.5)]
    pub theta: f64,
    /// Scale rows to unit norm first.
    #[arg(long)]
    pub normalize: bool,
    /// Point colours in the scatter plot.
    #[arg(long, value_enum, default_value_t = ColorArg::Subject)]
    pub color_by: ColorArg,
}

impl TsneKnobs {
    fn config(&self, seed: u64) -> TsneConfig {
        TsneConfig {
            perplexity: self.perplexity,
            iterations: self.tsne_iterations,
            learning_rate: self.learning_rate,
            seed,
            mode: match self.mode {
                TsneModeArg::Exact => TsneMode::Exact,
                TsneModeArg::BarnesHut => TsneMode::BarnesHut { theta: self.theta },
            },
            normalize_input: self.normalize,
            ..TsneConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TsneArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Metadata CSV, needed for colouring.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub knobs: TsneKnobs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatArg {
    Csv,
    Emat,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// JSON generator spec; missing fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the seed in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = FormatArg::Emat)]
    pub format: FormatArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// File name under the output directory; its extension picks the format.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AuditArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Probe targets, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [TargetArg::Yaw, TargetArg::Pitch, TargetArg::Media])]
    pub targets: Vec<TargetArg>,
    #[command(flatten)]
    #[serde(flatten)]
    pub probe: ProbeKnobs,
    #[command(flatten)]
    #[serde(flatten)]
    pub invariance: InvarianceKnobs,
    #[command(flatten)]
    #[serde(flatten)]
    pub verify: VerifyKnobs,
    #[command(flatten)]
    #[serde(flatten)]
    pub quality: QualityKnobs,
    #[command(flatten)]
    #[serde(flatten)]
    pub tsne: TsneKnobs,
    #[arg(long)]
    pub skip_tsne: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// An analysis failure tagged with the module that raised it.
#[derive(Debug)]
pub struct Failure {
    pub module: &'static str,
    pub error: Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.module, self.error)
    }
}

impl std::error::Error for Failure {}

fn within(module: &'static str) -> impl Fn(Error) -> Failure {
    move |error| Failure { module, error }
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Outputs {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Outputs {
    fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| Failure {
            module: "cli",
            error: Error::Io {
                path: dir.to_path_buf(),
                source: e,
            },
        })?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records a file already written under the output directory.
    fn record(&mut self, name: &str) -> CliResult<()> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|e| Failure {
            module: "cli",
            error: Error::Io { path, source: e },
        })?;
        self.artifacts.retain(|a| a.path != name);
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| Failure {
            module: "cli",
            error: Error::Io { path, source: e },
        })?;
        self.record(name)
    }

    fn csv(
        &mut self,
        name: &str,
        module: &'static str,
        write: impl FnOnce(&mut Vec<u8>) -> Result<(), Error>,
    ) -> CliResult<()> {
        let mut buf = Vec::new();
        write(&mut buf).map_err(within(module))?;
        self.bytes(name, &buf)
    }

    fn report(&mut self, name: &str, kind: &str, run: &Value, report: Value) -> CliResult<()> {
        let doc = json!({
            "schema": format!("embaudit/{kind}/v{SCHEMA_VERSION}"),
            "tool_version": env!("CARGO_PKG_VERSION"),
            "run": run,
            "report": report,
        });
        let mut text = serde_json::to_vec_pretty(&doc).expect("reports serialize");
        text.push(b'\n');
        self.bytes(name, &text)
    }

    fn finish(mut self, run: &Value) -> CliResult<Vec<Artifact>> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let doc = json!({
            "schema": format!("embaudit/manifest/v{SCHEMA_VERSION}"),
            "tool_version": env!("CARGO_PKG_VERSION"),
            "run": run,
            "artifacts": self.artifacts,
        });
        let mut text = serde_json::to_vec_pretty(&doc).expect("manifest serializes");
        text.push(b'\n');
        let path = self.path("manifest.json");
        fs::write(&path, text).map_err(|e| Failure {
            module: "cli",
            error: Error::Io { path, source: e },
        })?;
        Ok(self.artifacts)
    }
}

fn input_digest(path: &Path) -> CliResult<Value> {
    let bytes = fs::read(path).map_err(|e| Failure {
        module: "dataset",
        error: Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    Ok(json!({ "path": path.display().to_string(), "sha256": sha256_hex(&bytes) }))
}

/// The echo of a run: subcommand, every knob, and digests of the inputs.
/// The output directory and thread count are left out since they cannot
/// change any result.
fn run_echo<T: Serialize>(subcommand: &str, args: &T, inputs: &[&Path]) -> CliResult<Value> {
    let digests = inputs
        .iter()
        .map(|p| input_digest(p))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(json!({
        "subcommand": subcommand,
        "args": args,
        "inputs": digests,
    }))
}

fn load_dataset(data: &DataArgs) -> CliResult<Dataset> {
    let fm = load_features(&data.features, FeatureFormat::from_path(&data.features))
        .map_err(within("dataset"))?;
    let meta = load_metadata(&data.meta).map_err(within("dataset"))?;
    join(&fm, &meta, &[]).map_err(within("dataset"))
}

fn dataset_summary(ds: &Dataset) -> Value {
    json!({
        "items": ds.len(),
        "dim": ds.dim(),
        "dropped": ds.dropped().len(),
    })
}

fn probe_step(
    out: &mut Outputs,
    run: &Value,
    ds: &Dataset,
    target: TargetArg,
    knobs: &ProbeKnobs,
    seed: u64,
) -> CliResult<()> {
    let report =
        run_probe(ds, &knobs.target(target), &knobs.config(seed)).map_err(within("probes"))?;
    out.csv(&format!("probe_{}.csv", target.name()), "probes", |buf| {
        let mut text = String::from("iteration,test,train\n");
        for (i, (t, r)) in report
            .iterations
            .iter()
            .zip(&report.train_iterations)
            .enumerate()
        {
            text.push_str(&format!("{i},{t},{r}\n"));
        }
        buf.extend_from_slice(text.as_bytes());
        Ok(())
    })?;
    let value = serde_json::to_value(&report).expect("report serializes");
    out.report(
        &format!("probe_{}.json", target.name()),
        "probe",
        run,
        value,
    )
}

fn invariance_step(
    out: &mut Outputs,
    run: &Value,
    ds: &Dataset,
    knobs: &InvarianceKnobs,
) -> CliResult<InvarianceMap> {
    let cond = knobs.condition().map_err(within("invariance"))?;
    let map = compute_invariance_map(ds, &cond, &knobs.config()).map_err(within("invariance"))?;
    let index = invariance_index(&map);
    let top = rank_invariant_identities(&index, knobs.k.min(map.identity_count()))
        .map_err(within("invariance"))?;
    out.csv("invariance_map.csv", "invariance", |buf| map.write_csv(buf))?;
    emit_heatmap(&map, &out.path("invariance_heatmap.svg")).map_err(within("invariance"))?;
    out.record("invariance_heatmap.svg")?;
    let report = json!({
        "condition": cond,
        "feature_count": map.feature_count,
        "identity_count": map.identity_count(),
        "alpha_corrected": map.alpha_corrected,
        "index": index.entries,
        "most_invariant": top,
        "dataset": dataset_summary(ds),
    });
    out.report("invariance.json", "invariance", run, report)?;
    Ok(map)
}

fn verify_step(
    out: &mut Outputs,
    run: &Value,
    ds: &Dataset,
    map: &InvarianceMap,
    k: usize,
    knobs: &VerifyKnobs,
    seed: u64,
) -> CliResult<()> {
    let report = compare_invariant_vs_rest(ds, map, &knobs.config(k, seed))
        .map_err(within("verification"))?;
    out.csv("roc_invariant.csv", "verification", |buf| {
        report.roc_invariant.write_csv(buf)
    })?;
    out.csv("roc_rest.csv", "verification", |buf| {
        report.roc_rest.write_csv(buf)
    })?;
    let svg = plot::roc_svg(&[
        ("invariant", &report.roc_invariant.points),
        ("rest", &report.roc_rest.points),
    ]);
    out.bytes("roc.svg", svg.as_bytes())?;
    let curve = |c: &embedding_audit::verification::RocCurve| {
        let tar: Vec<Value> = [1e-3, 1e-2, 1e-1]
            .iter()
            .map(|&far| json!({ "far": far, "tar": c.tar_at_far(far) }))
            .collect();
        json!({
            "auc": c.auc,
            "genuine": c.genuine,
            "impostor": c.impostor,
            "tar_at_far": tar,
        })
    };
    let value = json!({
        "invariant_identities": report.invariant_identities,
        "comparator": report.comparator,
        "template_count": report.template_count,
        "config": report.config,
        "invariant": curve(&report.roc_invariant),
        "rest": curve(&report.roc_rest),
        "auc_margin": report.roc_invariant.auc - report.roc_rest.auc,
    });
    out.report("verification.json", "verification", run, value)
}

fn quality_step(
    out: &mut Outputs,
    run: &Value,
    fm: &FeatureMatrix,
    knobs: &QualityKnobs,
) -> CliResult<()> {
    let center = match knobs.center {
        CenterArg::Origin => Center::Origin,
        CenterArg::Centroid => Center::Centroid,
    };
    let ranking = rank_by_center_distance(fm, center).map_err(within("quality"))?;
    out.csv("quality_ranking.csv", "quality", |buf| {
        ranking.write_csv(buf)
    })?;
    let bands =
        gallery_manifest(&ranking, &knobs.percentiles, knobs.count).map_err(within("quality"))?;
    let take = match knobs.head_fraction {
        Some(f) => Take::Fraction(f),
        None => Take::Count(knobs.count.min(ranking.len())),
    };
    let head: Vec<&str> = ranking
        .head(take)
        .map_err(within("quality"))?
        .iter()
        .map(|it| it.item_id.as_str())
        .collect();
    let closest = ranking.head(Take::Count(1)).map_err(within("quality"))?;
    let report = json!({
        "center": center,
        "items": ranking.len(),
        "min_distance": closest[0].distance,
        "max_distance": ranking.items[ranking.len() - 1].distance,
        "median_distance": ranking.percentile_band(50.0, 1).map_err(within("quality"))?[0].distance,
        "head": head,
        "bands": bands,
    });
    out.report("quality.json", "quality", run, report)
}

fn tsne_step(
    out: &mut Outputs,
    run: &Value,
    fm: &FeatureMatrix,
    classes: Option<Vec<String>>,
    knobs: &TsneKnobs,
    seed: u64,
) -> CliResult<()> {
    let emb = embed(fm, &knobs.config(seed)).map_err(within("tsne"))?;
    out.csv("tsne.csv", "tsne", |buf| emb.write_csv(fm.item_ids(), buf))?;
    let classes = classes.unwrap_or_else(|| vec![String::new(); fm.rows()]);
    let svg = plot::scatter_svg(&emb.coords, &classes, "t-SNE");
    out.bytes("tsne.svg", svg.as_bytes())?;
    let report = json!({
        "items": fm.rows(),
        "config": emb.config,
        "kl_trace": emb.kl_trace,
        "final_kl": emb.kl_trace.last().map(|c| c.kl),
    });
    out.report("tsne.json", "tsne", run, report)
}

fn tsne_classes(ds: &Dataset, color: ColorArg) -> Option<Vec<String>> {
    match color {
        ColorArg::None => None,
        ColorArg::Subject => Some(ds.metadata().iter().map(|r| r.subject_id.clone()).collect()),
        ColorArg::Media => Some(
            ds.metadata()
                .iter()
                .map(|r| match r.media_type {
                    Some(MediaType::Still) => "still".to_string(),
                    Some(MediaType::VideoFrame) => "video".to_string(),
                    None => "unknown".to_string(),
                })
                .collect(),
        ),
    }
}

fn format_ext(format: FormatArg) -> (&'static str, FeatureFormat) {
    match format {
        FormatArg::Csv => ("csv", FeatureFormat::Csv),
        FormatArg::Emat => ("emat", FeatureFormat::Emat),
    }
}

/// Runs one parsed command, returning the artifacts listed in the manifest.
pub fn execute(cli: &Cli) -> CliResult<Vec<Artifact>> {
    let mut out = Outputs::create(&cli.out)?;
    let run = match &cli.command {
        Command::Probe(a) => {
            let run = run_echo("probe", a, &[&a.data.features, &a.data.meta])?;
            let ds = load_dataset(&a.data)?;
            probe_step(&mut out, &run, &ds, a.target, &a.knobs, a.seed)?;
            run
        }
        Command::Invariance(a) => {
            let run = run_echo("invariance", a, &[&a.data.features, &a.data.meta])?;
            let ds = load_dataset(&a.data)?;
            invariance_step(&mut out, &run, &ds, &a.knobs)?;
            run
        }
        Command::Verify(a) => {
            let run = run_echo("verify", a, &[&a.data.features, &a.data.meta])?;
            let ds = load_dataset(&a.data)?;
            let map = invariance_step(&mut out, &run, &ds, &a.invariance)?;
            verify_step(&mut out, &run, &ds, &map, a.invariance.k, &a.knobs, a.seed)?;
            run
        }
        Command::Quality(a) => {
            let run = run_echo("quality", a, &[&a.features])?;
            let fm = load_features(&a.features, FeatureFormat::from_path(&a.features))
                .map_err(within("dataset"))?;
            quality_step(&mut out, &run, &fm, &a.knobs)?;
            run
        }
        Command::Tsne(a) => {
            let mut inputs: Vec<&Path> = vec![&a.features];
            if let Some(m) = &a.meta {
                inputs.push(m);
            }
            let run = run_echo("tsne", a, &inputs)?;
            let fm = load_features(&a.features, FeatureFormat::from_path(&a.features))
                .map_err(within("dataset"))?;
            let (fm, classes) = match &a.meta {
                Some(meta) => {
                    let ds = load_dataset(&DataArgs {
                        features: a.features.clone(),
                        meta: meta.clone(),
                    })?;
                    (ds.features().clone(), tsne_classes(&ds, a.knobs.color_by))
                }
                None => (fm, None),
            };
            tsne_step(&mut out, &run, &fm, classes, &a.knobs, a.seed)?;
            run
        }
        Command::Synth(a) => {
            let inputs: Vec<&Path> = a.spec.iter().map(PathBuf::as_path).collect();
            let run = run_echo("synth", a, &inputs)?;
            let mut spec = match &a.spec {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| Failure {
                        module: "synth",
                        error: Error::Io {
                            path: path.clone(),
                            source: e,
                        },
                    })?;
                    serde_json::from_str::<SynthSpec>(&text).map_err(|e| Failure {
                        module: "synth",
                        error: Error::Json(e),
                    })?
                }
                None => SynthSpec::default(),
            };
            if let Some(seed) = a.seed {
                spec.seed = seed;
            }
            let (ds, truth) = generate(&spec).map_err(within("synth"))?;
            let (ext, format) = format_ext(a.format);
            let name = format!("features.{ext}");
            save_features(&out.path(&name), ds.features(), format).map_err(within("dataset"))?;
            out.record(&name)?;
            save_metadata(&out.path("metadata.csv"), ds.metadata()).map_err(within("dataset"))?;
            out.record("metadata.csv")?;
            out.report(
                "ground_truth.json",
                "ground-truth",
                &run,
                serde_json::to_value(&truth).expect("ground truth serializes"),
            )?;
            run
        }
        Command::Convert(a) => {
            let run = run_echo("convert", a, &[&a.input])?;
            let name = a.output.to_string_lossy().into_owned();
            if a.output.is_absolute() || a.output.components().count() != 1 {
                return Err(Failure {
                    module: "cli",
                    error: Error::InvalidArgument(format!(
                        "--output must be a bare file name, got `{name}`"
                    )),
                });
            }
            let fm = load_features(&a.input, FeatureFormat::from_path(&a.input))
                .map_err(within("dataset"))?;
            save_features(&out.path(&name), &fm, FeatureFormat::from_path(&a.output))
                .map_err(within("dataset"))?;
            out.record(&name)?;
            run
        }
        Command::Audit(a) => {
            let run = run_echo("audit", a, &[&a.data.features, &a.data.meta])?;
            let ds = load_dataset(&a.data)?;
            for &target in &a.targets {
                probe_step(&mut out, &run, &ds, target, &a.probe, a.seed)?;
            }
            let map = invariance_step(&mut out, &run, &ds, &a.invariance)?;
            verify_step(&mut out, &run, &ds, &map, a.invariance.k, &a.verify, a.seed)?;
            quality_step(&mut out, &run, ds.features(), &a.quality)?;
            if !a.skip_tsne {
                tsne_step(
                    &mut out,
                    &run,
                    ds.features(),
                    tsne_classes(&ds, a.tsne.color_by),
                    &a.tsne,
                    a.seed,
                )?;
            }
            run
        }
    };
    out.finish(&run)
}

/// Parses `argv` (program name first) and runs it. Returns the process exit
/// code: 0 on success, 2 on usage errors, 1 on data or analysis errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build()
        {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => {
                eprintln!("error: cli: cannot start {n} threads: {e}");
                return 1;
            }
        },
        None => execute(&cli),
    };
    match outcome {
        Ok(_) => 0,
        Err(failure) => {
            eprintln!("error: {failure}");
            1
        }
    }
}
