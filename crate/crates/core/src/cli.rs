//! The `ragscope` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 input/format error, 3 numeric or
//! contract failure. Diagnostics go to standard error; data goes to `--out`
//! or standard output. File outputs are written to a temporary file in the
//! target directory and renamed into place only on success.
//!
//! Every subcommand except `simulate` accepts `--config FILE`, a JSON object
//! keyed by the subcommand's long flag names in snake_case; flags given on
//! the command line win over config values.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attention::{self, Analysis, AttentionTensor, Sidecar};
use crate::attribution::{self, BagCaptioner};
use crate::datastore::{self, read_jsonl, CaptionStore};
use crate::error::{Error, Result};
use crate::majority::{self, MajorityReport};
use crate::metrics::{Corpus, Metric, Sample};
use crate::prompt::{self, PromptLayout, Template};
use crate::provenance::Provenance;
use crate::simulator::{self, ExperimentGrid, WorldParams};
use crate::strategy::{build_context, ListMap, Order, RetrievalContext, StrategyKind, StrategySpec};
use crate::text::{default_stopwords, Caption, StopWordList};

const FORMATS_HELP: &str = "\
File formats (all little-endian, UTF-8, LF line endings):
  EMB1 embeddings   b\"EMB1\", u32 rows, u32 dim, rows*dim f32 row-major,
                    b\"IDS\\n\", then one newline-terminated id per row.
  ATT1 attention    b\"ATT1\", u32 L, u32 H, u32 Q, u32 Z, u8 query kind,
                    u8 key kind (0 = text, 1 = image), L*H*Q*Z f32 in
                    [layer][head][query][key] order.
  Sidecar JSON      {\"spans\": {\"S1\": [lo, hi], ..., \"S5\": [lo, hi]},
                    \"image_cls_index\": 0}; spans are half-open and
                    partition the text axis.
  Captions JSONL    {\"image_id\": str, \"captions\": [str, ...]} per line;
                    caption j of image X has id \"X#j\".
  Candidates JSONL  {\"image_id\": str, \"caption\": str} per line.
  Majority JSONL    {\"retrieved\": [str, ...], \"generated\": str,
                    \"references\": [str, ...] (optional)} per line.
  Heatmap CSV       optional \"# \" comment lines, a header of an empty
                    corner cell plus input tokens, then one row per step
                    labelled by the generated token; 6-decimal values.
  Stop words        one word per line, \"#\" lines ignored.
Exit codes: 0 ok, 1 usage, 2 input/format, 3 numeric/contract.";

#[derive(Debug, Parser)]
#[command(name = "ragscope", version, about = "Retrieval-robustness diagnostics for retrieval-augmented captioning", after_help = FORMATS_HELP, arg_required_else_help = true)]
pub struct Cli {
    /// Worker threads (default: machine parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world: captions.jsonl, captions.emb1, images.emb1, world.json.
    World(WorldArgs),
    /// Cosine retrieval for every query embedding, optionally building a strategy context.
    Retrieve(RetrieveArgs),
    /// Assemble a prompt and print its tokens and segment spans.
    Prompt(PromptArgs),
    /// Majority tokens, majority-vote probability and overlap statistics.
    Majority(MajorityArgs),
    /// Max-attention segment distributions per layer and head.
    Attention(AttentionArgs),
    /// Integrated gradients on the bag-of-embeddings captioner.
    Attribute(AttributeArgs),
    /// Score candidates against references with CIDEr-D or BLEU-4.
    Evaluate(EvaluateArgs),
    /// Run a simulation grid and write one CSV row per cell.
    Simulate(SimulateArgs),
}

/// Field-wise `flag.or(config)` for option structs.
macro_rules! merge_from_config {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $ty {
            fn merged(self, config: Option<&Path>) -> Result<Self> {
                let Some(path) = config else { return Ok(self) };
                let base: $ty = load_json(path)?;
                Ok(Self {
                    config: self.config,
                    out: self.out,
                    $($field: self.$field.or(base.$field),)*
                })
            }
        }
    };
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub captions_per_image: Option<usize>,
    #[arg(long)]
    pub vocab_per_image: Option<usize>,
    #[arg(long)]
    pub caption_len: Option<usize>,
    #[arg(long)]
    pub function_rate: Option<f64>,
}
merge_from_config!(WorldArgs { seed, images, captions_per_image, vocab_per_image, caption_len, function_rate });

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Captions JSONL for the datastore.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// EMB1 caption embeddings (ids are caption ids).
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// EMB1 query image embeddings (ids are image ids).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Retrieval depth.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub strategy: Option<StrategyKind>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub order: Option<Order>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Template JSON; when given with --strategy, prompts are included.
    #[arg(long)]
    pub template: Option<PathBuf>,
}
merge_from_config!(RetrieveArgs { captions, index, queries, n, strategy, k, pool, order, seed, template });

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Retrieved caption, repeat in context order.
    #[arg(long = "caption")]
    pub captions: Option<Vec<String>>,
    /// Generated text appended to the generation segment.
    #[arg(long)]
    pub generated: Option<String>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}
merge_from_config!(PromptArgs { captions, generated, template, seed });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MajorityArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Majority JSONL samples.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Stop-word file (default: built-in list).
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Also write the CSV flattening here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}
merge_from_config!(MajorityArgs { input, stopwords, format, csv, seed });

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub analysis: Option<Analysis>,
    /// ATT1 tensor, repeat per sample.
    #[arg(long = "tensor")]
    pub tensors: Option<Vec<PathBuf>>,
    /// Span sidecar JSON, one per tensor in the same order.
    #[arg(long = "sidecar")]
    pub sidecars: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub seed: Option<u64>,
}
merge_from_config!(AttentionArgs { analysis, tensors, sidecars, seed });

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Heatmap CSV path.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// JSON {"retrieved": [str, ...], "generated": str}.
    #[arg(long)]
    pub context: Option<PathBuf>,
    /// Bucket JSON path (default: <out>.buckets.json).
    #[arg(long)]
    pub buckets: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    /// Riemann steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Embedding width of the captioner.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}
merge_from_config!(AttributeArgs { context, buckets, template, stopwords, steps, dim, seed });

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub metric: Option<Metric>,
    /// Candidates JSONL.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// References JSONL (captions format).
    #[arg(long)]
    pub references: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}
merge_from_config!(EvaluateArgs { metric, candidates, references, seed });

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config JSON (world parameters, grid, seeds, metrics).
    #[arg(long)]
    pub config: PathBuf,
    /// Results CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the world seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Contents of a `simulate --config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub world: WorldParams,
    #[serde(flatten)]
    pub grid: ExperimentGrid,
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn require<T>(v: Option<T>, flag: &str) -> std::result::Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}

fn check_inputs<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(Error::Input(format!("input file {} does not exist", p.display())));
        }
    }
    Ok(())
}

fn check_output(path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !parent.is_dir() {
            return Err(Error::Input(format!(
                "output directory {} does not exist",
                parent.display()
            )));
        }
    }
    Ok(())
}

/// Writes via a temporary file in the same directory and renames on success.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(std::fs::Permissions::from_mode(0o644))
            .map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn json_bytes(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("JSON value serializes");
    s.push('\n');
    s.into_bytes()
}

fn record<T: Serialize>(command: &str, args: &T) -> Value {
    json!({ "command": command, "args": args })
}

fn stopwords_from(path: Option<&PathBuf>) -> Result<StopWordList> {
    match path {
        Some(p) => StopWordList::load(p),
        None => Ok(default_stopwords()),
    }
}

fn template_from(path: Option<&PathBuf>) -> Result<Template> {
    match path {
        Some(p) => Template::load(p),
        None => Ok(Template::default()),
    }
}

fn spans_json(layout: &PromptLayout) -> Value {
    Sidecar::from_layout(layout).to_json()
}

pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    1
                }
            };
        }
    };
    if let Some(n) = cli.threads {
        // A pool may already exist when dispatch runs more than once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}\n\nFor more information, try '--help'.");
            1
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> std::result::Result<(), CliError> {
    match command {
        Command::World(a) => world(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Prompt(a) => prompt_cmd(a),
        Command::Majority(a) => majority_cmd(a),
        Command::Attention(a) => attention_cmd(a),
        Command::Attribute(a) => attribute(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Simulate(a) => simulate(a),
    }
}

fn world(a: WorldArgs) -> std::result::Result<(), CliError> {
    if let Some(c) = &a.config {
        check_inputs([c])?;
    }
    let config = a.config.clone();
    let a = a.merged(config.as_deref())?;
    let dir = require(a.out.clone(), "out")?;
    if !dir.is_dir() {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let defaults = WorldParams::default();
    let params = WorldParams {
        images: a.images.unwrap_or(defaults.images),
        captions_per_image: a.captions_per_image.unwrap_or(defaults.captions_per_image),
        vocab_per_image: a.vocab_per_image.unwrap_or(defaults.vocab_per_image),
        caption_len: a.caption_len.unwrap_or(defaults.caption_len),
        function_rate: a.function_rate.unwrap_or(defaults.function_rate),
    };
    let seed = a.seed.unwrap_or(0);
    let w = simulator::gen_world(seed, &params)?;
    let prov = Provenance::new(&record("world", &json!({ "seed": seed, "params": params })), seed);
    let manifest = json!({
        "provenance": prov,
        "params": params,
        "effective_seed": w.effective_seed,
        "files": {
            "captions": "captions.jsonl",
            "index": "captions.emb1",
            "queries": "images.emb1",
        },
    });
    write_atomic(&dir.join("captions.jsonl"), w.captions_jsonl().as_bytes())?;
    write_atomic(&dir.join("captions.emb1"), &w.index.to_emb1_bytes())?;
    write_atomic(&dir.join("images.emb1"), &w.image_embeddings.to_emb1_bytes())?;
    write_atomic(&dir.join("world.json"), &json_bytes(&manifest))?;
    Ok(())
}

fn retrieve(a: RetrieveArgs) -> std::result::Result<(), CliError> {
    let config = a.config.clone();
    if let Some(c) = &config {
        check_inputs([c])?;
    }
    let a = a.merged(config.as_deref())?;
    let captions = require(a.captions.clone(), "captions")?;
    let index_path = require(a.index.clone(), "index")?;
    let queries_path = require(a.queries.clone(), "queries")?;
    check_inputs([&captions, &index_path, &queries_path].into_iter().chain(a.template.as_ref()))?;
    check_output(a.out.as_deref())?;
    let n = a.n.unwrap_or(crate::strategy::DEFAULT_POOL_SIZE);
    let seed = a.seed.unwrap_or(0);
    let spec = match a.strategy {
        Some(kind) => {
            let k = a.k.or(kind.fixed_k());
            let spec = StrategySpec {
                kind,
                k: require(k, "k")?,
                pool_size: a.pool.unwrap_or(crate::strategy::DEFAULT_POOL_SIZE),
                order: a.order.unwrap_or_default(),
                seed,
            };
            spec.validate()?;
            Some(spec)
        }
        None => None,
    };
    let template = template_from(a.template.as_ref())?;

    let store = CaptionStore::load_jsonl(&captions)?;
    let index = datastore::load_embeddings(&index_path)?;
    let queries = datastore::load_embeddings(&queries_path)?;
    store.check_index(&index)?;
    let mut lists = ListMap::new();
    for (r, id) in queries.ids().iter().enumerate() {
        lists.insert(id.clone(), datastore::cosine_retrieve(queries.row(r), &index, &store, n)?);
    }
    let mut results = Vec::new();
    for (image_id, list) in &lists {
        let mut item = json!({ "image_id": image_id, "retrieval": list.entries });
        if let Some(spec) = &spec {
            let image_spec = StrategySpec {
                seed: crate::rng::derive_seed(seed, hash_id(image_id)),
                ..spec.clone()
            };
            let ctx = build_context(&image_spec, &lists, image_id)?;
            let layout = prompt::assemble_prompt(&ctx, &template)?;
            item["context"] = serde_json::to_value(&ctx.entries).expect("context serializes");
            item["prompt"] = json!({ "tokens": layout.tokens, "spans": spans_json(&layout)["spans"] });
        }
        results.push(item);
    }
    let prov = Provenance::new(&record("retrieve", &a), seed);
    let doc = json!({ "provenance": prov, "n": n, "strategy": spec, "results": results });
    emit(a.out.as_deref(), &json_bytes(&doc))?;
    Ok(())
}

/// Stable FNV-1a hash of an id, used to give each image its own seed stream.
fn hash_id(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn prompt_cmd(a: PromptArgs) -> std::result::Result<(), CliError> {
    let config = a.config.clone();
    if let Some(c) = &config {
        check_inputs([c])?;
    }
    let a = a.merged(config.as_deref())?;
    check_inputs(a.template.as_ref())?;
    check_output(a.out.as_deref())?;
    let captions = require(a.captions.clone(), "caption")?;
    let template = template_from(a.template.as_ref())?;
    let mut layout = prompt::assemble_raw(&captions, &template)?;
    if let Some(g) = &a.generated {
        for t in Caption::new(g.as_str()).tokens {
            layout = layout.append_generated(t.as_str());
        }
    }
    let segments: Vec<&str> = (0..layout.len())
        .map(|i| layout.segment_of(i).map(|s| s.name()))
        .collect::<Result<_>>()?;
    let seed = a.seed.unwrap_or(0);
    let prov = Provenance::new(&record("prompt", &a), seed);
    let sidecar = spans_json(&layout);
    let doc = json!({
        "provenance": prov,
        "tokens": layout.tokens,
        "segments": segments,
        "spans": sidecar["spans"],
        "image_cls_index": 0,
    });
    emit(a.out.as_deref(), &json_bytes(&doc))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MajoritySample {
    retrieved: Vec<String>,
    #[serde(default)]
    generated: Option<String>,
    #[serde(default)]
    references: Option<Vec<String>>,
}

fn majority_cmd(a: MajorityArgs) -> std::result::Result<(), CliError> {
    let config = a.config.clone();
    if let Some(c) = &config {
        check_inputs([c])?;
    }
    let a = a.merged(config.as_deref())?;
    let input = require(a.input.clone(), "input")?;
    check_inputs([&input].into_iter().chain(a.stopwords.as_ref()))?;
    check_output(a.out.as_deref())?;
    check_output(a.csv.as_deref())?;
    let sw = stopwords_from(a.stopwords.as_ref())?;
    let samples: Vec<MajoritySample> = read_jsonl(&input)?;
    if samples.is_empty() {
        return Err(Error::Input(format!("{} has no samples", input.display())).into());
    }
    let ctxs: Vec<RetrievalContext> = samples
        .iter()
        .map(|s| RetrievalContext::from_captions(s.retrieved.iter().map(|c| Caption::new(c.as_str())).collect()))
        .collect();
    let reports: Vec<MajorityReport> = ctxs.iter().map(|c| majority::majority_report(c, &sw)).collect();
    let histogram = majority::majority_count_histogram(&reports);

    let all_generated = samples.iter().all(|s| s.generated.is_some());
    let outputs: Option<Vec<Caption>> = all_generated
        .then(|| samples.iter().map(|s| Caption::new(s.generated.clone().unwrap_or_default())).collect());
    let vote = outputs
        .as_ref()
        .map(|o| majority::majority_vote_probability(&reports, o))
        .transpose()?;
    let copied = outputs
        .as_ref()
        .map(|o| majority::copied_token_fraction(&ctxs, o, &sw))
        .transpose()?;
    let overlap = samples
        .iter()
        .all(|s| s.references.is_some())
        .then(|| {
            let refs: Vec<Vec<Caption>> = samples
                .iter()
                .map(|s| s.references.iter().flatten().map(|r| Caption::new(r.as_str())).collect())
                .collect();
            majority::overlap_with_references(&reports, &refs)
        })
        .transpose()?;

    let mut per_sample = Vec::new();
    let mut csv = String::new();
    let seed = a.seed.unwrap_or(0);
    let prov = Provenance::new(&record("majority", &a), seed);
    csv.push_str(&format!("# {}\n", prov.comment()));
    csv.push_str("sample,k,majority_count,majority_tokens,hit,copied_retrieved,copied_majority\n");
    for (i, r) in reports.iter().enumerate() {
        let hit = vote.as_ref().and_then(|v| v.indicators[i]);
        let frac = outputs
            .as_ref()
            .and_then(|o| majority::copied_fractions_for(r, &o[i], &sw));
        let tokens: Vec<&str> = r.majority.iter().map(String::as_str).collect();
        per_sample.push(json!({
            "k": r.k,
            "majority": tokens,
            "counts": r.counts,
            "hit": hit,
            "copied_retrieved": frac.map(|f| f.0),
            "copied_majority": frac.map(|f| f.1),
        }));
        let opt_f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            r.k,
            r.majority.len(),
            tokens.join(" "),
            hit.map(|h| u8::from(h).to_string()).unwrap_or_default(),
            opt_f(frac.map(|f| f.0)),
            opt_f(frac.map(|f| f.1)),
        ));
    }
    let vote_json = vote.as_ref().map(|v| json!({ "overall": v.overall, "per_k": v.per_k }));
    let doc = json!({
        "provenance": prov,
        "samples": reports.len(),
        "per_sample": per_sample,
        "p_majority_vote": vote.as_ref().and_then(|v| v.p_majority_vote()),
        "vote": vote_json,
        "histogram": histogram,
        "overlap": overlap,
        "copied": copied,
    });
    if let Some(p) = &a.csv {
        write_atomic(p, csv.as_bytes())?;
    }
    match a.format.unwrap_or(Format::Json) {
        Format::Json => emit(a.out.as_deref(), &json_bytes(&doc))?,
        Format::Csv => emit(a.out.as_deref(), csv.as_bytes())?,
    }
    Ok(())
}

fn attention_cmd(a: AttentionArgs) -> std::result::Result<(), CliError> {
    let config = a.config.clone();
    if let Some(c) = &config {
        check_inputs([c])?;
    }
    let a = a.merged(config.as_deref())?;
    let analysis = require(a.analysis, "analysis")?;
    let tensors = require(a.tensors.clone(), "tensor")?;
    let sidecars = require(a.sidecars.clone(), "sidecar")?;
    if tensors.len() != sidecars.len() {
        return Err(CliError::Usage(format!(
            "{} --tensor values but {} --sidecar values",
            tensors.len(),
            sidecars.len()
        )));
    }
    check_inputs(tensors.iter().chain(&sidecars))?;
    check_output(a.out.as_deref())?;
    let mut samples = Vec::with_capacity(tensors.len());
    for (t, s) in tensors.iter().zip(&sidecars) {
        let tensor = AttentionTensor::load(t).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", t.display()),
            },
            other => other,
        })?;
        let check = tensor.row_check();
        if check.negative_values > 0 || check.unnormalized_rows > 0 {
            eprintln!(
                "warning: {}: {} negative values, {} rows not summing to 1 +- 1e-3",
                t.display(),
                check.negative_values,
                check.unnormalized_rows
            );
        }
        samples.push((tensor, Sidecar::load(s)?));
    }
    let dist = attention::analyse(analysis, &samples)?;
    if dist.is_empty() {
        eprintln!("warning: no queries were counted; proportions are empty");
    }
    let seed = a.seed.unwrap_or(0);
    let prov = Provenance::new(&record("attention", &a), seed);
    let mut out = format!("# {}\nlayer,head,segment,proportion\n", prov.comment());
    for cell in &dist.cells {
        let props = cell.proportions();
        for (i, name) in dist.segments.iter().enumerate() {
            let p = props.as_ref().map(|p| format!("{:.6}", p[i])).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", cell.layer, cell.head, name, p));
        }
    }
    emit(a.out.as_deref(), out.as_bytes())?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeContext {
    retrieved: Vec<String>,
    generated: String,
}

fn attribute(a: AttributeArgs) -> std::result::Result<(), CliError> {
    let config = a.config.clone();
    if let Some(c) = &config {
        check_inputs([c])?;
    }
    let a = a.merged(config.as_deref())?;
    let context = require(a.context.clone(), "context")?;
    check_inputs([&context].into_iter().chain(a.template.as_ref()).chain(a.stopwords.as_ref()))?;
    check_output(a.out.as_deref())?;
    let buckets_path = a
        .buckets
        .clone()
        .or_else(|| a.out.as_ref().map(|o| o.with_extension("buckets.json")));
    check_output(buckets_path.as_deref())?;
    let steps = a.steps.unwrap_or(attribution::DEFAULT_STEPS);
    let dim = a.dim.unwrap_or(16);
    let seed = a.seed.unwrap_or(0);
    let template = template_from(a.template.as_ref())?;
    let sw = stopwords_from(a.stopwords.as_ref())?;
    let ctx_doc: AttributeContext = load_json(&context)?;

    let mut layout = prompt::assemble_raw(&ctx_doc.retrieved, &template)?;
    let generated = Caption::new(ctx_doc.generated.as_str());
    if generated.is_empty() {
        return Err(Error::Input("generated caption has no tokens".into()).into());
    }
    for t in &generated.tokens {
        layout = layout.append_generated(t.as_str());
    }
    let captioner = BagCaptioner::new(layout.tokens.iter().cloned(), dim, seed)?;
    let attr = attribution::attribute_generation(&captioner, &layout, steps)?;
    let ctx = RetrievalContext::from_captions(ctx_doc.retrieved.iter().map(|c| Caption::new(c.as_str())).collect());
    let report = majority::majority_report(&ctx, &sw);
    let buckets = attribution::pairwise_buckets(&attr, &report, layout.generated())?;

    let prov = Provenance::new(&record("attribute", &a), seed);
    let heatmap = attribution::export_heatmap(&attr, &[prov.comment()])?;
    let bucket_doc = json!({
        "provenance": prov,
        "steps": steps,
        "majority": report.majority,
        "buckets": buckets,
    });
    emit(a.out.as_deref(), &heatmap)?;
    if let Some(p) = &buckets_path {
        write_atomic(p, &json_bytes(&bucket_doc))?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateRecord {
    image_id: String,
    caption: String,
}

fn evaluate(a: EvaluateArgs) -> std::result::Result<(), CliError> {
    let config = a.config.clone();
    if let Some(c) = &config {
        check_inputs([c])?;
    }
    let a = a.merged(config.as_deref())?;
    let metric = require(a.metric, "metric")?;
    let cand_path = require(a.candidates.clone(), "candidates")?;
    let ref_path = require(a.references.clone(), "references")?;
    check_inputs([&cand_path, &ref_path])?;
    check_output(a.out.as_deref())?;
    let candidates: Vec<CandidateRecord> = read_jsonl(&cand_path)?;
    let references = datastore::read_caption_records(&ref_path)?;
    let by_image: BTreeMap<&str, &Vec<String>> = references
        .iter()
        .map(|r| (r.image_id.as_str(), &r.captions))
        .collect();
    let samples = candidates
        .iter()
        .map(|c| {
            let refs = by_image.get(c.image_id.as_str()).ok_or_else(|| {
                Error::Input(format!("no references for image {:?}", c.image_id))
            })?;
            Ok(Sample {
                candidate: Caption::new(c.caption.as_str()),
                references: refs.iter().map(|r| Caption::new(r.as_str())).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let corpus = Corpus::new(samples)?;
    if metric == Metric::Cider && corpus.len() == 1 {
        eprintln!("warning: CIDEr-D over a single image has zero IDF everywhere");
    }
    let score = metric.score(&corpus)?;
    let seed = a.seed.unwrap_or(0);
    let prov = Provenance::new(&record("evaluate", &a), seed);
    let per_sample: Vec<Value> = candidates
        .iter()
        .zip(&score.per_sample)
        .map(|(c, s)| json!({ "image_id": c.image_id, "score": s }))
        .collect();
    let doc = json!({
        "provenance": prov,
        "metric": metric,
        "corpus_score": score.corpus_score,
        "per_sample": per_sample,
    });
    emit(a.out.as_deref(), &json_bytes(&doc))?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> std::result::Result<(), CliError> {
    check_inputs([&a.config])?;
    check_output(a.out.as_deref())?;
    let mut config: SimConfig = load_json(&a.config)?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    for (i, s) in config.grid.strategies.iter().enumerate() {
        StrategySpec {
            kind: s.kind,
            k: s.k,
            pool_size: s.pool,
            order: s.order,
            seed: 0,
        }
        .validate()
        .map_err(|e| Error::Input(format!("strategy {i}: {e}")))?;
    }
    let w = simulator::gen_world(config.seed, &config.world)?;
    let rows = simulator::run_experiment(&w, &config.grid, &default_stopwords())?;
    let prov = Provenance::new(&record("simulate", &config), config.seed);
    let mut buf = Vec::new();
    let comment = format!("{} baseline=lambda0_proxy", prov.comment());
    simulator::write_results_csv(&rows, &comment, &mut buf).map_err(|e| Error::io("<csv>", e))?;
    emit(a.out.as_deref(), &buf)?;
    Ok(())
}
