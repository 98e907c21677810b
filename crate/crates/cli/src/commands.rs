use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use archdistill::archspace::SearchSpace;
use archdistill::corpus::{self, Example, SyntheticTaskSpec, TeacherParams};
use archdistill::distill::{self, DistillParams, LogitDataset, MappedClassifier, Reference, VocabMap};
use archdistill::estimators::{forward_flops, model_size, model_size_fp32};
use archdistill::gasearch::{self, GaParams};
use archdistill::nn::{self, Classifier, EncoderModel};
use archdistill::ArchConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::failure::Failure;
use crate::report::{self, RunReport};
use crate::{
    BenchArgs, CaptureArgs, Cli, Command, DistillArgs, EstimateArgs, GenerateArgs, ReportArgs, SearchArgs, SpaceArg,
    TeachArgs,
};

pub const ARCH_FILE: &str = "arch.json";
pub const GA_RESULT_FILE: &str = "ga_result.json";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const LOGITS_FILE: &str = "logits.ldst";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const VOCAB_MAP_FILE: &str = "vocab_map.json";
pub const CORPUS_SPEC_FILE: &str = "corpus_spec.json";

fn split_file(split: &str) -> String {
    format!("{split}.jsonl")
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let started = Instant::now();
    let out = &cli.out;
    let mut report = match &cli.command {
        Command::Estimate(a) => estimate(a)?,
        Command::Search(a) => search(out, a)?,
        Command::Generate(a) => generate(out, a)?,
        Command::Teach(a) => teach(out, a)?,
        Command::Capture(a) => capture(out, a)?,
        Command::Distill(a) => distill_cmd(out, a)?,
        Command::Bench(a) => bench(out, a)?,
        Command::Report(a) => return show_report(out, a),
    };
    report.wall_seconds = started.elapsed().as_secs_f64();
    report::record(out, report)
}

fn new_report(command: &str, config: Value, seed: u64, metrics: Value) -> RunReport {
    RunReport {
        command: command.to_owned(),
        config,
        seed,
        metrics,
        wall_seconds: 0.0,
        artifacts: BTreeMap::new(),
    }
}

/// Reads an artifact another command was supposed to produce.
fn require(path: &Path, producer: &'static str) -> anyhow::Result<Vec<u8>> {
    if !path.exists() {
        return Err(Failure::Missing {
            path: path.to_owned(),
            producer,
        }
        .into());
    }
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_user_file(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())).into())
}

fn parse_json<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> anyhow::Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())).into())
}

/// A flat JSON config file, or defaults when none is given.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        Some(p) => parse_json(&read_user_file(p)?, p),
        None => Ok(T::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path, producer: &'static str) -> anyhow::Result<EncoderModel> {
    let bytes = require(path, producer)?;
    nn::decode_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn save_model(path: &Path, model: &EncoderModel) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    nn::write_checkpoint(model, &mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn load_examples(path: &Path, producer: &'static str) -> anyhow::Result<Vec<Example>> {
    let bytes = require(path, producer)?;
    corpus::read_examples(BufReader::new(bytes.as_slice())).with_context(|| format!("parsing {}", path.display()))
}

fn to_value<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("plain data serializes")
}

fn estimate(a: &EstimateArgs) -> anyhow::Result<RunReport> {
    let config = match &a.config {
        Some(p) => ArchConfig::from_json_slice(&read_user_file(p)?).with_context(|| format!("{}", p.display()))?,
        None => ArchConfig::pretrained_reference(),
    };
    config.check_shape()?;
    if a.space == Some(SpaceArg::Table1) {
        SearchSpace::default_table1().validate(&config)?;
    }
    let seq_len = a.seq_len.unwrap_or(config.max_seq_len.min(400));
    let size = model_size(&config, a.bytes_per_param)?;
    let flops = forward_flops(&config, seq_len)?;
    let metrics = json!({
        "param_count": size.param_count,
        "bytes": size.bytes,
        "megabytes": size.megabytes,
        "flops": flops.flops,
        "gflops": flops.gflops,
        "seq_len": seq_len,
    });
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    let effective = json!({
        "arch": config,
        "seq_len": seq_len,
        "bytes_per_param": a.bytes_per_param,
        "space": a.space.map(|_| "table1").unwrap_or("none"),
    });
    Ok(new_report("estimate", effective, 0, metrics))
}

fn search(out: &Path, a: &SearchArgs) -> anyhow::Result<RunReport> {
    let mut params: GaParams = load_config(a.config.as_deref())?;
    let mut teacher_mb = None;
    if let Some(f) = a.teacher_fraction {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Failure::Usage(format!("--teacher-fraction must be positive, got {f}")).into());
        }
        let teacher = load_model(&out.join(TEACHER_FILE), "teach")?;
        let mb = model_size_fp32(teacher.config()).megabytes;
        params.target_size_mb = f * mb;
        params.max_seq_len = teacher.config().max_seq_len;
        params.num_classes = teacher.config().num_classes;
        teacher_mb = Some(mb);
    }
    if let Some(t) = a.target_mb {
        params.target_size_mb = t;
    }
    if !(params.target_size_mb > 0.0 && params.target_size_mb.is_finite()) {
        return Err(Failure::Usage(format!("target size must be positive, got {} MB", params.target_size_mb)).into());
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { params.$field = v; })*};
    }
    set!(population => population_size, crossover_rate => crossover_rate, max_iter => max_iter,
         child_size => child_size, seed => rng_seed, max_seq_len => max_seq_len, num_classes => num_classes,
         seq_len => fitness_seq_len);
    // short-context tasks cannot be costed at the default length
    if a.seq_len.is_none() && params.fitness_seq_len > params.max_seq_len {
        params.fitness_seq_len = params.max_seq_len;
    }

    let result = gasearch::search(&SearchSpace::default_table1(), &params)?;
    let ga_path = out.join(GA_RESULT_FILE);
    let arch_path = out.join(ARCH_FILE);
    write_json(&ga_path, &result)?;
    fs::write(&arch_path, result.best.to_json_pretty() + "\n")?;
    println!("{}", serde_json::to_string_pretty(&result)?);

    let mut metrics = json!({
        "best": result.best,
        "best_fitness": result.best_fitness,
        "size_mb": result.size_mb,
        "gflops": result.gflops,
        "history": result.history,
        "evaluations": result.evaluations,
        "elapsed_seconds": result.elapsed_seconds,
    });
    if let Some(mb) = teacher_mb {
        metrics["teacher_size_mb"] = json!(mb);
    }
    let mut r = new_report("search", to_value(&params), params.rng_seed, metrics);
    r.artifacts.insert("ga_result".into(), ga_path);
    r.artifacts.insert("arch".into(), arch_path);
    Ok(r)
}

fn generate(out: &Path, a: &GenerateArgs) -> anyhow::Result<RunReport> {
    let mut spec: SyntheticTaskSpec = load_config(a.config.as_deref())?;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { spec.$field = v; })*};
    }
    set!(seed => rng_seed, vocab_size => vocab_size, min_len => min_len, max_len => max_len,
         labeled => labeled, unlabeled => unlabeled, validation => validation, test => test);
    let corpus = corpus::generate(&spec)?;
    let spec_path = out.join(CORPUS_SPEC_FILE);
    write_json(&spec_path, &spec)?;
    let mut r = new_report("generate", to_value(&spec), spec.rng_seed, Value::Null);
    r.artifacts.insert("corpus_spec".into(), spec_path);
    let mut sizes = serde_json::Map::new();
    for (name, examples) in corpus.splits() {
        let path = out.join(split_file(name));
        let mut buf = Vec::new();
        corpus::write_examples(examples, &mut buf)?;
        fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?;
        let positives = examples.iter().filter(|e| e.label == Some(1)).count();
        sizes.insert(name.into(), json!({"examples": examples.len(), "positives": positives}));
        r.artifacts.insert(name.into(), path);
    }
    r.metrics = Value::Object(sizes);
    Ok(r)
}

fn default_teacher(spec: &SyntheticTaskSpec) -> ArchConfig {
    ArchConfig::new(4, 128, 4, 512, spec.vocab_size, spec.max_seq_len(), spec.num_classes())
}

fn teach(out: &Path, a: &TeachArgs) -> anyhow::Result<RunReport> {
    let spec_path = out.join(CORPUS_SPEC_FILE);
    let spec: SyntheticTaskSpec = parse_json(&require(&spec_path, "generate")?, &spec_path)?;
    let arch = match &a.arch {
        Some(p) => ArchConfig::from_json_slice(&read_user_file(p)?).with_context(|| format!("{}", p.display()))?,
        None => default_teacher(&spec),
    };
    let mut params: TeacherParams = load_config(a.config.as_deref())?;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { params.$field = v; })*};
    }
    set!(epochs => epochs, lr => learning_rate, batch_size => batch_size, seed => rng_seed);

    let labeled = load_examples(&out.join(split_file("labeled")), "generate")?;
    let validation = load_examples(&out.join(split_file("validation")), "generate")?;
    let test = load_examples(&out.join(split_file("test")), "generate")?;
    let outcome = corpus::train_teacher(&arch, &labeled, &validation, &params)?;
    let test_accuracy = if test.is_empty() {
        None
    } else {
        Some(corpus::accuracy(&outcome.model, &test)?)
    };
    let path = out.join(TEACHER_FILE);
    save_model(&path, &outcome.model)?;

    let size = model_size_fp32(&arch);
    let mut metrics = json!({
        "loss_trace": outcome.loss_trace,
        "train_accuracy": outcome.train_accuracy,
        "param_count": size.param_count,
        "size_mb": size.megabytes,
    });
    if let Some(v) = outcome.validation_accuracy {
        metrics["validation_accuracy"] = json!(v);
    }
    if let Some(v) = test_accuracy {
        metrics["test_accuracy"] = json!(v);
    }
    eprintln!("teacher: {metrics}");
    let config = json!({"arch": arch, "training": params});
    let mut r = new_report("teach", config, params.rng_seed, metrics);
    r.artifacts.insert("teacher".into(), path);
    Ok(r)
}

fn capture(out: &Path, a: &CaptureArgs) -> anyhow::Result<RunReport> {
    let teacher = load_model(&out.join(TEACHER_FILE), "teach")?;
    let unlabeled = load_examples(&out.join(split_file("unlabeled")), "generate")?;
    let seqs: Vec<&[u32]> = unlabeled.iter().map(|e| e.ids.as_slice()).collect();
    let (data, skipped) = distill::capture_teacher_logits(&teacher, &seqs, a.strict)?;
    let path = out.join(LOGITS_FILE);
    let mut buf = Vec::new();
    data.write_text(&mut buf)?;
    fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?;
    let metrics = json!({
        "records": data.len(),
        "skipped": skipped.len(),
        "skipped_examples": skipped.iter().take(20).collect::<Vec<_>>(),
    });
    let mut r = new_report("capture", json!({"strict": a.strict}), 0, metrics);
    r.artifacts.insert("logits".into(), path);
    Ok(r)
}

fn distill_cmd(out: &Path, a: &DistillArgs) -> anyhow::Result<RunReport> {
    let logits_path = out.join(LOGITS_FILE);
    let bytes = require(&logits_path, "capture")?;
    let data = LogitDataset::parse(&bytes).with_context(|| format!("parsing {}", logits_path.display()))?;
    let arch_path = a.arch.clone().unwrap_or_else(|| out.join(ARCH_FILE));
    let arch = ArchConfig::from_json_slice(&require(&arch_path, "search")?)
        .with_context(|| format!("{}", arch_path.display()))?;

    let mut params: DistillParams = load_config(a.config.as_deref())?;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { params.$field = v; })*};
    }
    set!(temperature => temperature, lr => learning_rate, epochs => epochs, batch_size => batch_size,
         seed => rng_seed);

    let mut artifacts = BTreeMap::new();
    let widest = data.records().iter().flat_map(|r| r.ids.iter()).copied().max().unwrap_or(0) as usize;
    if params.vocab_map.is_none() && widest >= arch.vocab {
        let seqs: Vec<&[u32]> = data.records().iter().map(|r| r.ids.as_slice()).collect();
        let map = VocabMap::from_frequency(&seqs, arch.vocab)?;
        let map_path = out.join(VOCAB_MAP_FILE);
        fs::write(&map_path, map.to_json_pretty() + "\n")?;
        artifacts.insert("vocab_map".to_owned(), map_path);
        params.vocab_map = Some(map);
    } else if out.join(VOCAB_MAP_FILE).exists() {
        // stale from an earlier student; bench would otherwise pick it up
        fs::remove_file(out.join(VOCAB_MAP_FILE))?;
    }

    let outcome = distill::distill_train(&arch, &data, &params)?;
    let path = out.join(STUDENT_FILE);
    save_model(&path, &outcome.model)?;
    artifacts.insert("student".to_owned(), path);

    let student = MappedClassifier {
        model: &outcome.model,
        vocab_map: params.vocab_map.as_ref(),
    };
    let mut metrics = json!({
        "initial_loss": outcome.initial_loss,
        "loss_trace": outcome.loss_trace,
        "final_loss": outcome.final_loss,
        "entropy_floor": data.entropy_floor(params.temperature),
        "records": data.len(),
        "size_mb": model_size_fp32(&arch).megabytes,
        "param_count": model_size_fp32(&arch).param_count,
    });
    let test_path = out.join(split_file("test"));
    if test_path.exists() {
        let test = load_examples(&test_path, "generate")?;
        let student_acc = corpus::accuracy(&student, &test)?;
        metrics["student_test_accuracy"] = json!(student_acc);
        let teacher_path = out.join(TEACHER_FILE);
        if teacher_path.exists() {
            let teacher = load_model(&teacher_path, "teach")?;
            let seqs: Vec<&[u32]> = test.iter().map(|e| e.ids.as_slice()).collect();
            let teacher_acc = corpus::accuracy(&teacher, &test)?;
            metrics["teacher_test_accuracy"] = json!(teacher_acc);
            metrics["retention"] = json!(student_acc / teacher_acc.max(f64::MIN_POSITIVE));
            metrics["teacher_agreement"] = json!(distill::agreement(&student, Reference::Teacher(&teacher), &seqs)?);
            let len = arch.max_seq_len.min(teacher.config().max_seq_len);
            metrics["flops_ratio"] = json!(
                forward_flops(&arch, len)?.flops as f64 / forward_flops(teacher.config(), len)?.flops as f64
            );
        }
    }
    eprintln!("student: {metrics}");

    let mut config = to_value(&params);
    if let Value::Object(m) = &mut config {
        m.remove("vocab_map");
        m.insert("arch".into(), to_value(&arch));
        m.insert("vocab_map_path".into(), json!(artifacts.get("vocab_map")));
        if m["vocab_map_path"].is_null() {
            m.insert("vocab_map_path".into(), json!("none"));
        }
    }
    let mut r = new_report("distill", config, params.rng_seed, metrics);
    r.artifacts = artifacts;
    Ok(r)
}

struct Timed<'a> {
    name: &'static str,
    model: Box<dyn Classifier + 'a>,
    config: ArchConfig,
}

fn time_pass(model: &dyn Classifier, sample: &[Vec<u32>]) -> anyhow::Result<f64> {
    let start = Instant::now();
    for seq in sample {
        std::hint::black_box(model.logits(seq)?);
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / sample.len() as f64)
}

fn bench(out: &Path, a: &BenchArgs) -> anyhow::Result<RunReport> {
    if a.n == 0 || a.repeats == 0 {
        return Err(Failure::Usage("-n and --repeats must be at least 1".into()).into());
    }
    let teacher_path = a.teacher.clone().unwrap_or_else(|| out.join(TEACHER_FILE));
    let student_path = a.student.clone().unwrap_or_else(|| out.join(STUDENT_FILE));
    let examples_path = a.examples.clone().unwrap_or_else(|| out.join(split_file("test")));
    let teacher = load_model(&teacher_path, "teach")?;
    let student = load_model(&student_path, "distill")?;
    let map_path = out.join(VOCAB_MAP_FILE);
    let vocab_map = if a.student.is_none() && map_path.exists() {
        Some(VocabMap::from_json_slice(&fs::read(&map_path)?)?)
    } else {
        None
    };
    let examples = load_examples(&examples_path, "generate")?;
    if examples.is_empty() {
        return Err(Failure::Usage(format!("{} has no examples", examples_path.display())).into());
    }

    let n = a.n.min(examples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let picks = rand::seq::index::sample(&mut rng, examples.len(), n);
    let sample: Vec<Vec<u32>> = picks
        .iter()
        .map(|i| {
            let ids = &examples[i].ids;
            match a.seq_len {
                Some(len) => ids[..len.min(ids.len())].to_vec(),
                None => ids.clone(),
            }
        })
        .collect();
    if sample.iter().any(|s| s.is_empty()) {
        return Err(Failure::Usage("--seq-len must be at least 1".into()).into());
    }

    let models = [
        Timed {
            name: "teacher",
            config: *teacher.config(),
            model: Box::new(MappedClassifier {
                model: &teacher,
                vocab_map: None,
            }),
        },
        Timed {
            name: "student",
            config: *student.config(),
            model: Box::new(MappedClassifier {
                model: &student,
                vocab_map: vocab_map.as_ref(),
            }),
        },
    ];
    for m in &models {
        for _ in 0..a.warmup {
            time_pass(m.model.as_ref(), &sample)?;
        }
    }
    let mut per_repeat = [Vec::new(), Vec::new()];
    for rep in 0..a.repeats {
        // alternate who goes first so drift does not favour one model
        let order: [usize; 2] = if rep % 2 == 0 { [0, 1] } else { [1, 0] };
        for k in order {
            per_repeat[k].push(time_pass(models[k].model.as_ref(), &sample)?);
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_len = sample.iter().map(|s| s.len()).sum::<usize>() as f64 / n as f64;
    let cost_len = (mean_len.round() as usize).clamp(1, teacher.config().max_seq_len.min(student.config().max_seq_len));
    let mut metrics = json!({"examples": n, "repeats": a.repeats, "mean_seq_len": mean_len});
    for (k, m) in models.iter().enumerate() {
        metrics[m.name] = json!({
            "per_repeat_ms": per_repeat[k],
            "mean_ms": mean(&per_repeat[k]),
            "gflops": forward_flops(&m.config, cost_len)?.gflops,
            "size_mb": model_size_fp32(&m.config).megabytes,
        });
    }
    let (t, s) = (mean(&per_repeat[0]), mean(&per_repeat[1]));
    metrics["latency_ratio_student_over_teacher"] = json!(s / t);
    metrics["speedup_teacher_over_student"] = json!(t / s);
    metrics["flops_ratio_student_over_teacher"] = json!(
        forward_flops(&models[1].config, cost_len)?.flops as f64 / forward_flops(&models[0].config, cost_len)?.flops as f64
    );
    println!("{}", serde_json::to_string_pretty(&metrics)?);

    let config = json!({
        "teacher": teacher_path,
        "student": student_path,
        "examples": examples_path,
        "n": a.n,
        "repeats": a.repeats,
        "warmup": a.warmup,
        "seq_len": a.seq_len.map(|v| json!(v)).unwrap_or(json!("full")),
        "threads": std::env::var("MATMUL_NUM_THREADS").unwrap_or_else(|_| "1".into()),
        "vocab_map": vocab_map.is_some(),
    });
    Ok(new_report("bench", config, a.seed, metrics))
}

fn show_report(out: &Path, a: &ReportArgs) -> anyhow::Result<()> {
    let path = out.join(report::REPORT_FILE);
    require(&path, "estimate|search|generate|teach|capture|distill|bench")?;
    let all = report::load_all(out)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&all)?);
        return Ok(());
    }
    for (command, r) in &all {
        println!("{command} (seed {}, {:.2} s)", r.seed, r.wall_seconds);
        if let Value::Object(m) = &r.metrics {
            for (k, v) in m {
                let shown = match v {
                    Value::Array(items) if items.len() > 6 => format!("[{} values, last {}]", items.len(), items[items.len() - 1]),
                    other => other.to_string(),
                };
                println!("  {k}: {shown}");
            }
        }
        for (role, p) in &r.artifacts {
            println!("  artifact {role}: {}", p.display());
        }
    }
    Ok(())
}
