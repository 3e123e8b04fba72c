use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use permgnn::autodiff;
use permgnn::autodiff::archive::{self, Metadata};
use permgnn::bench::{bench_predict, write_bench_csv, BenchConfig, HashMethod};
use permgnn::eval::{aa_score, cn_score, compute_metrics, rank_fold, RankedEntry, RankedList};
use permgnn::graph::{load_graph, load_linqs, make_split, EvalSplit, Fold, Graph, Label};
use permgnn::hash::{
    build_index, random_hyperplane_codes, read_predictions, topk_predict, train_hasher,
    write_predictions, Candidates, HashCodes, HashIndex,
};
use permgnn::model::{read_embeddings, similarity, write_embeddings};
use permgnn::trainer::{embed_nodes, Trainer};
use permgnn::{Error, Result};

use crate::config::{CandidateSet, RunConfig};
use crate::{Cli, Command, GraphArgs};

const CFG_PREFIX: &str = "cfg.";

fn load(args: &GraphArgs) -> Result<Graph> {
    match (&args.edges, &args.content, &args.cites) {
        (Some(e), None, None) => load_graph(e, args.features.as_deref()),
        (None, Some(c), Some(k)) => load_linqs(c, k),
        _ => Err(Error::Config(
            "give --edges [--features] or --content with --cites".into(),
        )),
    }
}

fn read_split(path: &Path) -> Result<EvalSplit> {
    EvalSplit::read(
        BufReader::new(File::open(path)?),
        &path.display().to_string(),
    )
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_header(w: &mut impl Write, header: &[String]) -> Result<()> {
    for line in header {
        writeln!(w, "# {line}")?;
    }
    Ok(())
}

fn read_matrix(path: &Path) -> Result<autodiff::Matrix> {
    read_embeddings(
        BufReader::new(File::open(path)?),
        &path.display().to_string(),
    )
}

fn check_rows(emb: &autodiff::Matrix, g: &Graph) -> Result<()> {
    if emb.nrows() != g.num_nodes() {
        return Err(Error::Dimension(format!(
            "{} embeddings for a graph of {} nodes",
            emb.nrows(),
            g.num_nodes()
        )));
    }
    Ok(())
}

fn pair(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(s) = cli.seed {
        flags.push(pair("seed", s));
    }
    match &cli.command {
        Command::Split { ratios, .. } => {
            if let Some(r) = ratios {
                flags.push(pair("ratios", format!("{} {} {}", r[0], r[1], r[2])));
            }
        }
        Command::Train {
            mode,
            preset,
            epochs,
            lr,
            ..
        } => {
            if let Some(p) = preset {
                flags.push(pair("preset", p));
            }
            if let Some(m) = mode {
                flags.push(pair("mode", m));
            }
            if let Some(e) = epochs {
                flags.push(pair("epochs_max", e));
            }
            if let Some(lr) = lr {
                flags.push(pair("lr", lr));
            }
        }
        Command::Hash {
            hash, bits, j, l, ..
        } => {
            push_opt(&mut flags, "hash", hash);
            push_opt(&mut flags, "bits", bits);
            push_opt(&mut flags, "j", j);
            push_opt(&mut flags, "l", l);
        }
        Command::Predict {
            hash,
            j,
            l,
            k,
            candidates,
            ..
        } => {
            push_opt(&mut flags, "hash", hash);
            push_opt(&mut flags, "j", j);
            push_opt(&mut flags, "l", l);
            push_opt(&mut flags, "k", k);
            push_opt(&mut flags, "candidates", candidates);
        }
        Command::Evaluate { cutoff, .. } => push_opt(&mut flags, "cutoff", cutoff),
        Command::Bench { k, bits, .. } => {
            push_opt(&mut flags, "k", k);
            push_opt(&mut flags, "bits", bits);
        }
        Command::Embed { .. } => {}
    }
    let cfg = RunConfig::assemble(&flags, cli.config.as_deref())?;
    match cli.command {
        Command::Split { graph, out, .. } => split(&cfg, &graph, &out),
        Command::Train {
            graph,
            split,
            out,
            trace,
            ..
        } => train(&cfg, &graph, &split, &out, trace.as_deref()),
        Command::Embed {
            graph,
            split,
            model,
            out,
        } => embed(&graph, &split, &model, &out),
        Command::Hash {
            graph,
            split,
            embeddings,
            out,
            index,
            ..
        } => hash(&cfg, &graph, &split, &embeddings, &out, index.as_deref()),
        Command::Predict {
            graph,
            split,
            embeddings,
            codes,
            out,
            ..
        } => predict(&cfg, &graph, &split, &embeddings, codes.as_deref(), &out),
        Command::Evaluate {
            graph,
            split,
            predictions,
            embeddings,
            scorer,
            out,
            per_query,
            ..
        } => evaluate(
            &cfg,
            &graph,
            &split,
            Source::pick(
                predictions.as_deref(),
                embeddings.as_deref(),
                scorer.as_deref(),
            )?,
            &out,
            per_query.as_deref(),
        ),
        Command::Bench {
            graph,
            split,
            embeddings,
            js,
            ls,
            out,
            ..
        } => bench(&cfg, &graph, &split, &embeddings, js, ls, &out),
    }
}

fn push_opt<T: ToString>(flags: &mut Vec<(String, String)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        flags.push(pair(key, v.to_string()));
    }
}

fn split(cfg: &RunConfig, graph: &GraphArgs, out: &Path) -> Result<()> {
    let g = load(graph)?;
    let s = make_split(&g, cfg.ratios, cfg.seed)?;
    let mut w = create(out)?;
    write_header(&mut w, &cfg.header("split"))?;
    s.write(&mut w)?;
    w.flush()?;
    log::info!("{} queries", s.queries.len());
    Ok(())
}

fn train(
    cfg: &RunConfig,
    graph: &GraphArgs,
    split: &Path,
    out: &Path,
    trace: Option<&Path>,
) -> Result<()> {
    let g = load(graph)?;
    let s = read_split(split)?;
    let tg = s.training_graph(&g)?;
    let trainer = Trainer::new(&tg, &s, cfg.train.clone())?;
    let outcome = trainer.run(None, None)?;
    let params = match &outcome.phi {
        Some(phi) => outcome.theta.merged(phi),
        None => outcome.theta.clone(),
    };
    let mut meta: Metadata = cfg
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (format!("{CFG_PREFIX}{k}"), v))
        .collect();
    meta.insert("config_hash".into(), cfg.hash());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("best_epoch".into(), outcome.best_epoch.to_string());
    meta.insert("stopped_early".into(), outcome.stopped_early.to_string());
    archive::save(out, &params, &meta)?;
    if let Some(path) = trace {
        let mut w = create(path)?;
        write_header(&mut w, &cfg.header("train"))?;
        outcome.trace.write_csv(&mut w)?;
        w.flush()?;
    }
    let best = outcome.trace.records.get(outcome.best_epoch);
    eprintln!(
        "trained {} epochs; best epoch {} (val AP {:.4})",
        outcome.trace.records.len(),
        outcome.best_epoch,
        best.map_or(f64::NAN, |r| r.val_ap)
    );
    Ok(())
}

/// The configuration a checkpoint was trained under.
fn checkpoint_config(meta: &Metadata) -> Result<RunConfig> {
    let pairs: Vec<(String, String)> = meta
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(CFG_PREFIX)
                .map(|k| (k.to_string(), v.clone()))
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Archive("checkpoint carries no configuration".into()));
    }
    let mut cfg = RunConfig::default();
    cfg.apply(&pairs)?;
    Ok(cfg)
}

fn embed(graph: &GraphArgs, split: &Path, model: &Path, out: &Path) -> Result<()> {
    let g = load(graph)?;
    let s = read_split(split)?;
    let tg = s.training_graph(&g)?;
    let (params, meta) = archive::load(model)?;
    let cfg = checkpoint_config(&meta)?;
    let theta = params.subset("enc.");
    let emb = embed_nodes(
        &tg,
        &theta,
        cfg.train.reduction,
        cfg.train.mode,
        cfg.seed,
        None,
    )?;
    let mut w = create(out)?;
    write_embeddings(&mut w, &emb, &cfg.header("embed"))?;
    w.flush()?;
    Ok(())
}

fn hash(
    cfg: &RunConfig,
    graph: &GraphArgs,
    split: &Path,
    embeddings: &Path,
    out: &Path,
    index: Option<&Path>,
) -> Result<()> {
    let g = load(graph)?;
    let s = read_split(split)?;
    let tg = s.training_graph(&g)?;
    let emb = read_matrix(embeddings)?;
    check_rows(&emb, &tg)?;
    let codes = match cfg.hash {
        HashMethod::Learned => train_hasher(&emb, &tg, &cfg.hasher)?.codes,
        HashMethod::Hyperplane => random_hyperplane_codes(&emb, cfg.hasher.bits, cfg.seed)?,
        HashMethod::None => return Err(Error::Config("`hash` needs learned or hyperplane".into())),
    };
    let header = cfg.header("hash");
    let mut w = create(out)?;
    codes.write(&mut w, &header)?;
    w.flush()?;
    if let Some(path) = index {
        let idx = build_index(&codes, cfg.j, cfg.l, cfg.seed)?;
        let mut w = create(path)?;
        write_header(&mut w, &header)?;
        write_index(&mut w, &idx)?;
        w.flush()?;
    }
    Ok(())
}

/// `proj ℓ h…` lines, then `bucket ℓ id members…`.
fn write_index(w: &mut impl Write, idx: &HashIndex) -> Result<()> {
    writeln!(w, "# J {} L {}", idx.j, idx.tables.len())?;
    for (t, proj) in idx.projections.iter().enumerate() {
        let bits: Vec<String> = proj.iter().map(|h| h.to_string()).collect();
        writeln!(w, "proj\t{t}\t{}", bits.join(" "))?;
    }
    for (t, table) in idx.tables.iter().enumerate() {
        for (id, members) in table {
            let m: Vec<String> = members.iter().map(|v| v.to_string()).collect();
            writeln!(w, "bucket\t{t}\t{id}\t{}", m.join(" "))?;
        }
    }
    Ok(())
}

fn read_codes(path: &Path) -> Result<HashCodes> {
    HashCodes::read(
        BufReader::new(File::open(path)?),
        &path.display().to_string(),
    )
}

fn predict(
    cfg: &RunConfig,
    graph: &GraphArgs,
    split: &Path,
    embeddings: &Path,
    codes: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let g = load(graph)?;
    let s = read_split(split)?;
    let tg = s.training_graph(&g)?;
    let emb = read_matrix(embeddings)?;
    check_rows(&emb, &tg)?;
    let index = match cfg.hash {
        HashMethod::None => None,
        _ => {
            let path = codes
                .ok_or_else(|| Error::Config("--codes is required unless --hash none".into()))?;
            let c = read_codes(path)?;
            if c.len() != emb.nrows() {
                return Err(Error::Dimension(format!(
                    "{} codes for {} embeddings",
                    c.len(),
                    emb.nrows()
                )));
            }
            Some(build_index(&c, cfg.j, cfg.l, cfg.seed)?)
        }
    };
    let candidates = match cfg.candidates {
        CandidateSet::Potential => Candidates::PotentialEdges(&tg),
        CandidateSet::Test => Candidates::TestFold(&s),
    };
    let pred = topk_predict(
        index.as_ref(),
        &emb,
        &s.query_ids(),
        candidates,
        cfg.k,
        false,
    )?;
    let mut w = create(out)?;
    write_predictions(&mut w, &pred, &cfg.header("predict"))?;
    w.flush()?;
    eprintln!("{} pair comparisons", pred.comparisons);
    Ok(())
}

pub enum Source<'a> {
    Predictions(&'a Path),
    Embeddings(&'a Path),
    Cn,
    Aa,
}

impl<'a> Source<'a> {
    fn pick(
        predictions: Option<&'a Path>,
        embeddings: Option<&'a Path>,
        scorer: Option<&str>,
    ) -> Result<Self> {
        match (predictions, embeddings, scorer) {
            (Some(p), None, None) => Ok(Source::Predictions(p)),
            (None, Some(e), None) => Ok(Source::Embeddings(e)),
            (None, None, Some("cn")) => Ok(Source::Cn),
            (None, None, Some("aa")) => Ok(Source::Aa),
            _ => Err(Error::Config(
                "give exactly one of --predictions, --embeddings or --scorer".into(),
            )),
        }
    }
}

fn evaluate(
    cfg: &RunConfig,
    graph: &GraphArgs,
    split: &Path,
    source: Source<'_>,
    out: &Path,
    per_query: Option<&Path>,
) -> Result<()> {
    let s = read_split(split)?;
    let lists: Vec<RankedList> = match source {
        Source::Predictions(path) => {
            let stored = read_predictions(
                BufReader::new(File::open(path)?),
                &path.display().to_string(),
            )?;
            s.queries
                .iter()
                .map(|q| {
                    let positives: std::collections::BTreeSet<_> =
                        q.partners(Fold::Test, Label::Edge).collect();
                    let entries = stored
                        .get(&q.query)
                        .map(|l| {
                            l.iter()
                                .map(|&(partner, score)| RankedEntry {
                                    partner,
                                    score,
                                    relevant: positives.contains(&partner),
                                })
                                .collect()
                        })
                        .unwrap_or_default();
                    let mut list = RankedList::from_scored(q.query, entries);
                    list.num_relevant = positives.len();
                    list
                })
                .collect()
        }
        Source::Embeddings(path) => {
            let emb = read_matrix(path)?;
            let n = emb.nrows();
            if let Some(bad) = s
                .queries
                .iter()
                .find(|q| q.query >= n || q.test.iter().any(|it| it.partner >= n))
            {
                return Err(Error::Index {
                    node: bad.query,
                    num_nodes: n,
                });
            }
            s.queries
                .iter()
                .map(|q| rank_fold(q, Fold::Test, |u, v| similarity(emb.row(u), emb.row(v))))
                .collect()
        }
        Source::Cn | Source::Aa => {
            let tg = s.training_graph(&load(graph)?)?;
            let aa = matches!(source, Source::Aa);
            s.queries
                .iter()
                .map(|q| {
                    rank_fold(q, Fold::Test, |u, v| {
                        if aa {
                            aa_score(&tg, u, v)
                        } else {
                            cn_score(&tg, u, v)
                        }
                    })
                })
                .collect()
        }
    };
    let report = compute_metrics(&lists, cfg.cutoff);
    let mut w = create(out)?;
    write_header(&mut w, &cfg.header("evaluate"))?;
    report.write(&mut w)?;
    w.flush()?;
    if let Some(path) = per_query {
        let mut w = create(path)?;
        write_header(&mut w, &cfg.header("evaluate"))?;
        report.write_per_query_csv(&mut w)?;
        w.flush()?;
    }
    eprintln!(
        "MAP {:.4}  MRR {:.4}  NDCG {:.4}",
        report.map, report.mrr, report.ndcg
    );
    Ok(())
}

fn bench(
    cfg: &RunConfig,
    graph: &GraphArgs,
    split: &Path,
    embeddings: &Path,
    js: Option<Vec<usize>>,
    ls: Option<Vec<usize>>,
    out: &Path,
) -> Result<()> {
    let g = load(graph)?;
    let s = read_split(split)?;
    let tg = s.training_graph(&g)?;
    let emb = read_matrix(embeddings)?;
    check_rows(&emb, &tg)?;
    let defaults = BenchConfig::default();
    let bc = BenchConfig {
        k: cfg.k,
        js: js.unwrap_or(defaults.js),
        ls: ls.unwrap_or(defaults.ls),
        hasher: cfg.hasher.clone(),
        methods: defaults.methods,
        seed: cfg.seed,
    };
    let rows = bench_predict(&emb, &tg, &s, &bc)?;
    let mut w = create(out)?;
    write_header(&mut w, &cfg.header("bench"))?;
    write_bench_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}
