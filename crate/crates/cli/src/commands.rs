use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use geo_erasure::corpus::{self, load_manifest, DataBias, DatasetCounts, MentionCounts, ProfileOptions};
use geo_erasure::distributions::load_gdp;
use geo_erasure::metrics::{self, RChoice, RSelection};
use geo_erasure::prompts::{
    expand, parse_subjects, parse_templates, PromptSet, SplitManifest, SplitStrategy,
};
use geo_erasure::report::cross_model_erasure;
use geo_erasure::scoring::{MockBackend, MockTable, ScoringBackend};
use geo_erasure::temperature::{self, TauCurve, TauObjective};
use geo_erasure::{build_report, CandidateSet, ErasureReport, ProbDist, ReportOptions};
use serde::Serialize;

use crate::config::{read_input, sha256_hex, Loaded, Overrides};
use crate::error::CliError;
use crate::TauMode;

type CmdResult = Result<(), CliError>;

fn write_file(path: &Path, contents: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

fn load_report(path: &Path) -> Result<ErasureReport, CliError> {
    let text = read_input("report", path)?;
    ErasureReport::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn require_config(config: Option<&Path>, command: &str) -> Result<PathBuf, CliError> {
    config
        .map(Path::to_path_buf)
        .ok_or_else(|| CliError::Config(format!("{command} needs --config")))
}

pub fn expand_prompts(
    config: Option<&Path>,
    overrides: &Overrides,
    templates: Option<PathBuf>,
    subjects: Option<PathBuf>,
    out: &Path,
) -> CmdResult {
    let loaded = Loaded::load(config, overrides)?;
    let pick = |flag: Option<PathBuf>, configured: &Option<PathBuf>, role: &str| {
        flag.or_else(|| configured.as_ref().map(|p| loaded.resolve(p)))
            .ok_or_else(|| CliError::Config(format!("no {role} file given")))
    };
    let templates = pick(templates, &loaded.config.data.templates, "templates")?;
    let subjects = pick(subjects, &loaded.config.data.subjects, "subjects")?;
    let set = expand(
        &parse_templates(&read_input("templates", &templates)?)?,
        &parse_subjects(&read_input("subjects", &subjects)?)?,
    )?;
    write_file(out, &(set.to_json() + "\n"))?;
    println!("{} prompts written to {}", set.len(), out.display());
    Ok(())
}

pub fn split_prompts(
    config: Option<&Path>,
    overrides: &Overrides,
    prompts: Option<PathBuf>,
    strategy: SplitStrategy,
    folds: usize,
    out: &Path,
) -> CmdResult {
    let mut loaded = Loaded::load(config, overrides)?;
    let set = match prompts {
        Some(p) => PromptSet::from_json(&read_input("prompts", &p)?)?,
        None => loaded.prompts()?,
    };
    let manifest = SplitManifest::build(&set, strategy, folds, loaded.seed())?;
    write_file(out, &manifest.to_json())?;
    println!(
        "{folds} fold(s) of {} prompts written to {}",
        set.len(),
        out.display()
    );
    Ok(())
}

fn run_audit(loaded: &mut Loaded) -> Result<ErasureReport, CliError> {
    let settings = loaded.config.audit.clone();
    if settings.r.is_nan() || settings.r <= 1.0 {
        return Err(CliError::Config(format!(
            "auditing requires r > 1, got {}",
            settings.r
        )));
    }
    let prompts = loaded.prompts()?;
    if prompts.is_empty() {
        return Err(CliError::Config("the prompt set is empty".into()));
    }
    let truth = loaded.ground_truth()?;
    let backend = loaded.backend()?;
    let options = ReportOptions {
        r: settings.r,
        temperature: settings.temperature,
        seed: loaded.seed(),
        bootstrap_resamples: settings.bootstrap_resamples,
        workers: loaded.workers(),
    };
    let mut report = build_report(&*backend, &prompts, &truth, &options)?;
    report.metadata.config = Some(loaded.embedded());
    report.metadata.input_hashes = loaded.hashes.clone();
    Ok(report)
}

pub fn audit(config: Option<&Path>, overrides: &Overrides, r: Option<f64>) -> CmdResult {
    let mut loaded = Loaded::load(Some(&require_config(config, "audit")?), overrides)?;
    if let Some(r) = r {
        loaded.config.audit.r = r;
    }
    let report = run_audit(&mut loaded)?;
    let dir = loaded.out_dir(overrides);
    write_file(&dir.join("report.json"), &report.to_json())?;
    write_file(&dir.join("ratios.csv"), &report.ratio_table_csv())?;
    write_file(&dir.join("boxplot.csv"), &report.boxplot_csv())?;
    let erased: Vec<&str> = report.aggregate_model.erasure_set.names().collect();
    println!(
        "{} prompts, average ER^{} = {:.4} (95% CI [{:.4}, {:.4}]), aggregate ER = {:.4}, erased: {}",
        report.prompts.len(),
        report.metadata.r,
        report.average_er,
        report.average_er_ci.lower,
        report.average_er_ci.upper,
        report.aggregate_model.er,
        if erased.is_empty() {
            "none".to_string()
        } else {
            erased.join(", ")
        }
    );
    println!("wrote report.json, ratios.csv, boxplot.csv to {}", dir.display());
    Ok(())
}

fn report_predictions(report: &ErasureReport) -> Result<(Vec<ProbDist>, ProbDist), CliError> {
    let set = report.candidate_set()?;
    let preds = report
        .prompts
        .iter()
        .map(|p| ProbDist::new(set.clone(), p.probs.clone()))
        .collect::<geo_erasure::Result<Vec<_>>>()?;
    let truth = ProbDist::new(set, report.ground_truth.clone())?;
    Ok((preds, truth))
}

fn sweep_csv(choice: &RChoice) -> String {
    let mut out =
        String::from("r,median_er,p25_er,p75_er,median_kl,median_set_size,p25_set_size,p75_set_size,gap\n");
    for row in &choice.table {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            row.r,
            row.median_er,
            row.p25_er,
            row.p75_er,
            row.median_kl,
            row.median_set_size,
            row.p25_set_size,
            row.p75_set_size,
            row.gap
        );
    }
    out
}

pub fn choose_r(
    config: Option<&Path>,
    overrides: &Overrides,
    report_in: Option<&Path>,
    mode: Option<RSelection>,
) -> CmdResult {
    let mut loaded = Loaded::load(config, overrides)?;
    let report = match report_in {
        Some(p) => load_report(p)?,
        None => {
            require_config(config, "choose-r without --report-in")?;
            run_audit(&mut loaded)?
        }
    };
    let settings = &loaded.config.audit;
    let (preds, truth) = report_predictions(&report)?;
    let mode = mode.unwrap_or(settings.r_selection);
    let choice = metrics::choose_r(&preds, &truth, settings.r_min..=settings.r_max, mode)?;
    let dir = loaded.out_dir(overrides);
    write_file(&dir.join("r_sweep.csv"), &sweep_csv(&choice))?;
    let json = serde_json::to_string_pretty(&choice).expect("choice serializes") + "\n";
    write_file(&dir.join("choose_r.json"), &json)?;
    println!("r = {}", choice.r);
    Ok(())
}

pub struct ProfileArgs {
    pub manifest: PathBuf,
    pub aliases: PathBuf,
    pub out: PathBuf,
    pub counts_out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub r: Option<f64>,
    pub floor: f64,
    pub case_insensitive: bool,
}

#[derive(Serialize)]
struct ProfileOutput {
    countries: Vec<String>,
    probabilities: Vec<f64>,
    counts: MentionCounts,
    per_dataset: Vec<DatasetCounts>,
    floored_countries: Vec<String>,
    floor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_bias: Option<DataBias>,
    input_hashes: BTreeMap<String, String>,
}

pub fn corpus_profile(overrides: &Overrides, args: ProfileArgs) -> CmdResult {
    let mut hashes = BTreeMap::new();
    let manifest_text = read_input("manifest", &args.manifest)?;
    hashes.insert("manifest".to_string(), sha256_hex(manifest_text.as_bytes()));
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let datasets = load_manifest(manifest_text.as_bytes(), base)?;
    let aliases_text = read_input("aliases", &args.aliases)?;
    hashes.insert("aliases".to_string(), sha256_hex(aliases_text.as_bytes()));
    let mut candidates = CandidateSet::from_aliases_json(aliases_text.as_bytes())?;

    let report = match &args.report {
        Some(p) => {
            let text = read_input("report", p)?;
            hashes.insert("report".to_string(), sha256_hex(text.as_bytes()));
            let report = ErasureReport::from_json(&text)?;
            candidates = candidates.restrict(&report.countries)?;
            Some(report)
        }
        None => None,
    };
    let candidates = Arc::new(candidates);
    let options = ProfileOptions {
        floor: args.floor,
        workers: overrides.workers.unwrap_or(0),
        case_insensitive: args.case_insensitive,
    };
    let profile = corpus::profile(&datasets, &candidates, &options)?;

    let data_bias = match &report {
        Some(report) => {
            if candidates.names().ne(report.countries.iter().map(String::as_str)) {
                return Err(CliError::Config(
                    "report countries are not in alias-file order".into(),
                ));
            }
            let truth = ProbDist::new(candidates.clone(), report.ground_truth.clone())?;
            let preds = ProbDist::new(candidates.clone(), report.aggregate_model.probs.clone())?;
            Some(corpus::data_bias(
                &truth,
                &profile,
                &preds,
                args.r.unwrap_or(report.metadata.r),
            )?)
        }
        None => None,
    };

    let mut table = String::from("country,weighted_count,probability,floored\n");
    for (i, country) in candidates.names().enumerate() {
        let _ = writeln!(
            table,
            "{},{},{},{}",
            if country.contains(',') {
                format!("\"{country}\"")
            } else {
                country.to_string()
            },
            profile.counts.counts[i],
            profile.dist.probs()[i],
            profile.floored_countries.iter().any(|c| c == country)
        );
    }
    let output = ProfileOutput {
        countries: candidates.names().map(str::to_string).collect(),
        probabilities: profile.dist.probs().to_vec(),
        counts: profile.counts,
        per_dataset: profile.per_dataset,
        floored_countries: profile.floored_countries,
        floor: profile.floor,
        data_bias,
        input_hashes: hashes,
    };
    write_file(
        &args.out,
        &(serde_json::to_string_pretty(&output).expect("profile serializes") + "\n"),
    )?;
    let counts_out = args.counts_out.unwrap_or_else(|| args.out.with_extension("csv"));
    write_file(&counts_out, &table)?;
    println!(
        "{} documents, {} bytes; {} countries floored",
        output.counts.total_documents,
        output.counts.total_bytes,
        output.floored_countries.len()
    );
    if let Some(b) = data_bias {
        println!(
            "ER(true, train) = {:.4}, ER(train, model) = {:.4}, ER(true, model) = {:.4}",
            b.er_true_vs_train, b.er_train_vs_model, b.er_true_vs_model
        );
    }
    Ok(())
}

pub struct TempArgs {
    pub report_in: PathBuf,
    pub r: Option<f64>,
    pub interval: String,
    pub objective: TauObjective,
    pub mode: TauMode,
    pub perplexity_texts: Option<PathBuf>,
    pub out: PathBuf,
}

fn parse_interval(text: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::Config(format!("interval must look like 0.25:4.0, got {text:?}"));
    let (a, b) = text.split_once(':').ok_or_else(bad)?;
    let lo: f64 = a.trim().parse().map_err(|_| bad())?;
    let hi: f64 = b.trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

#[derive(Serialize)]
struct TempOutput {
    curve: TauCurve,
    #[serde(skip_serializing_if = "Option::is_none")]
    perplexity_note: Option<String>,
    input_hashes: BTreeMap<String, String>,
}

pub fn mitigate_temp(config: Option<&Path>, overrides: &Overrides, args: TempArgs) -> CmdResult {
    let mut loaded = Loaded::load(config, overrides)?;
    let report_text = read_input("report", &args.report_in)?;
    let report = ErasureReport::from_json(&report_text)?;
    let mut hashes = BTreeMap::from([("report".to_string(), sha256_hex(report_text.as_bytes()))]);
    let r = args.r.unwrap_or(report.metadata.r);
    let interval = parse_interval(&args.interval)?;

    let wants_backend = matches!(args.mode, TauMode::Exact)
        || args.perplexity_texts.is_some()
        || (matches!(args.mode, TauMode::Auto) && loaded.has_backend());
    let backend: Option<Arc<dyn ScoringBackend>> = if wants_backend {
        Some(loaded.backend()?)
    } else {
        None
    };
    let exact = match args.mode {
        TauMode::Exact => true,
        TauMode::Aggregate => false,
        TauMode::Auto => backend
            .as_ref()
            .is_some_and(|b| b.descriptor().supports_temperature),
    };

    let curve = if exact {
        let backend = backend.as_ref().expect("exact mode has a backend");
        // scoring needs the aliases, which the report does not keep
        let set = loaded.candidates()?.restrict(&report.countries)?;
        if set.names().ne(report.countries.iter().map(String::as_str)) {
            return Err(CliError::Config(
                "report countries are not in alias-file order".into(),
            ));
        }
        let truth = ProbDist::new(Arc::new(set), report.ground_truth.clone())?;
        let prompts: Vec<String> = report.prompts.iter().map(|p| p.text.clone()).collect();
        temperature::optimize_tau_exact(&**backend, &prompts, &truth, r, interval, args.objective)?
    } else {
        if report.metadata.temperature != 1.0 {
            return Err(CliError::Config(format!(
                "report was scored at temperature {}; rescaling needs scores at temperature 1",
                report.metadata.temperature
            )));
        }
        let (_, truth) = report_predictions(&report)?;
        let masses: Vec<Vec<f64>> = report.prompts.iter().map(|p| p.log_masses.clone()).collect();
        temperature::optimize_tau(&masses, &truth, r, interval, args.objective)?
    };

    let mut curve = curve;
    let mut perplexity_note = None;
    if let Some(path) = &args.perplexity_texts {
        let text = read_input("perplexity texts", path)?;
        hashes.insert("perplexity_texts".to_string(), sha256_hex(text.as_bytes()));
        let texts: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let backend = backend.as_ref().expect("perplexity trace has a backend");
        match temperature::tau_perplexity_trace(&**backend, &texts, &curve.tau_values) {
            Ok(values) => curve.perplexity_values = Some(values),
            Err(geo_erasure::Error::Scoring(e @ geo_erasure::scoring::ScoringError::Capability(_))) => {
                log::warn!("perplexity trace skipped: {e}");
                perplexity_note = Some(e.to_string());
            }
            Err(e) => return Err(e.into()),
        }
    }

    write_file(&args.out.with_extension("csv"), &curve.to_csv())?;
    println!(
        "tau* = {:.4} ({:?}), ER^{r} at tau* = {:.4}, at tau=1 = {}",
        curve.tau_star,
        curve.mode,
        curve.er_at_star,
        curve.er_at_one.map_or("n/a".to_string(), |e| format!("{e:.4}"))
    );
    let output = TempOutput {
        curve,
        perplexity_note,
        input_hashes: hashes,
    };
    write_file(
        &args.out,
        &(serde_json::to_string_pretty(&output).expect("curve serializes") + "\n"),
    )
}

pub fn compare(
    config: Option<&Path>,
    overrides: &Overrides,
    reports: &[PathBuf],
    gdp: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CmdResult {
    let loaded = Loaded::load(config, overrides)?;
    let gdp_path = gdp
        .or_else(|| loaded.config.data.gdp.as_ref().map(|p| loaded.resolve(p)))
        .ok_or_else(|| CliError::Config("compare needs a GDP file (--gdp)".into()))?;
    let gdp = load_gdp(read_input("gdp", &gdp_path)?.as_bytes())?;
    let reports = reports
        .iter()
        .map(|p| load_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    let counts = cross_model_erasure(&reports)?;

    let mut rows: Vec<(String, Option<f64>, usize)> = counts
        .into_iter()
        .filter(|(_, n)| *n > 0)
        .map(|(c, n)| {
            let g = gdp.get(&c).copied();
            (c, g, n)
        })
        .collect();
    for (c, g, _) in &rows {
        if g.is_none() {
            log::warn!("no GDP for {c}; listed last");
        }
    }
    // richest first; countries without GDP go last, by name
    rows.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.0.cmp(&b.0)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(&b.0),
    });
    let mut table = String::from("country,gdp_per_capita,model_count\n");
    for (c, g, n) in rows {
        let g = g.map(|g| g.to_string()).unwrap_or_default();
        let _ = writeln!(
            table,
            "{},{g},{n}",
            if c.contains(',') { format!("\"{c}\"") } else { c }
        );
    }
    match out {
        Some(path) => write_file(&path, &table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

pub fn export_map(report_in: &Path, out: &Path) -> CmdResult {
    let report = load_report(report_in)?;
    write_file(out, &report.map_csv())
}

pub fn serve_mock(table: &Path, label: &str, addr: &str) -> CmdResult {
    let table = MockTable::parse(&read_input("mock table", table)?)?;
    let backend = Arc::new(MockBackend::new(table, label));
    geo_erasure_server::run(backend, addr, |bound| {
        println!("serving {label} on http://{bound}");
        let _ = std::io::stdout().flush();
    })
    .map_err(|e| CliError::Other(format!("server on {addr}: {e}")))
}
