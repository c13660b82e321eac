use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sparsealign::adapt::{adapt_alignment, grid};
use sparsealign::align::AlignmentStrategy;
use sparsealign::eval::{evaluate_run, format_run, mean, read_run, Metric, Qrels};
use sparsealign::index::{IndexKind, TokenIndex};
use sparsealign::retrieve::{RankedList, RetrievalConfig, Retriever};
use sparsealign::salience::{SalienceConfig, SalienceHeads};
use sparsealign::store::{read_store, write_store, EmbeddingStore};
use sparsealign::synth::{synth_corpus, synth_distributed, DistributedSpec, PlantSpec};
use sparsealign::train::{train_salience, TrainConfig};

use crate::failure::{write_file, Failure};
use crate::manifest::Recorder;
use crate::{
    AdaptArgs, CorpusKind, EvalArgs, IndexArgs, KindArg, RetrievalArgs, SearchArgs, StrategyArg,
    SynthArgs, TrainArgs,
};

pub fn load_heads(path: Option<&PathBuf>) -> Result<Option<SalienceHeads>, Failure> {
    Ok(path.map(SalienceHeads::load).transpose()?)
}

fn retrieval_config(
    args: &RetrievalArgs,
    strategy: AlignmentStrategy,
) -> Result<RetrievalConfig, Failure> {
    let config = RetrievalConfig {
        strategy,
        neighbors_per_token: args.neighbors,
        final_top_n: args.top_n,
        nprobe: args.nprobe,
        normalize: !args.no_normalize,
        full_store_refinement: args.full_store,
        salience: SalienceConfig {
            alpha_q: args.alpha_q,
            alpha_d: args.alpha_d,
            epsilon: args.epsilon,
            beta_q: args.beta_q,
            beta_d: 1.0,
        },
    };
    config.validate()?;
    Ok(config)
}

/// Index, store and queries, checked against each other.
struct Collection {
    index: TokenIndex,
    store: EmbeddingStore,
    queries: EmbeddingStore,
}

impl Collection {
    fn load(index: &Path, store: &Path, queries: &Path) -> Result<Self, Failure> {
        let index = TokenIndex::load(index)?;
        let store = read_store(store)?;
        index.check_store(&store)?;
        let queries = read_store(queries)?;
        if queries.dim() != store.dim() {
            return Err(sparsealign::Error::Dimension {
                expected: store.dim(),
                found: queries.dim(),
            }
            .into());
        }
        Ok(Self {
            index,
            store,
            queries,
        })
    }
}

pub fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let mut rec = Recorder::start("synth");
    let corpus = match args.kind {
        CorpusKind::Planted => synth_corpus(
            args.seed,
            args.docs,
            args.tokens_per_doc,
            args.dim,
            &PlantSpec {
                num_queries: args.queries,
                noise: args.noise,
                ..PlantSpec::default()
            },
        )?,
        CorpusKind::Distributed => synth_distributed(
            args.seed,
            &DistributedSpec {
                num_queries: args.queries,
                dim: args.dim,
                ..DistributedSpec::default()
            },
        )?,
    };
    rec.stage("generate");
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Failure::io(&args.out_dir, e))?;
    let docs = args.out_dir.join("docs.mvix");
    let queries = args.out_dir.join("queries.mvix");
    let qrels = args.out_dir.join("qrels.txt");
    write_store(&corpus.docs, &docs)?;
    write_store(&corpus.queries, &queries)?;
    corpus.qrels.write(&qrels)?;
    rec.stage("write");
    let tokens: usize = corpus.docs.iter().map(|d| d.embeddings.len()).sum();
    println!(
        "wrote {} documents ({tokens} tokens), {} queries, {} judgments to {}",
        corpus.docs.len(),
        corpus.queries.len(),
        corpus.qrels.len(),
        args.out_dir.display()
    );
    rec.finish(args, Some(args.seed), &[], &[&docs, &queries, &qrels])?;
    Ok(())
}

pub fn index(args: &IndexArgs) -> Result<(), Failure> {
    let mut rec = Recorder::start("index");
    let store = read_store(&args.store)?;
    let heads = load_heads(args.heads.as_ref())?;
    if args.beta_d < 1.0 && heads.is_none() && !store.has_salience() {
        return Err(Failure::config(format!(
            "--beta-d {} keeps tokens by salience; pass --heads (the store carries no stored salience)",
            args.beta_d
        )));
    }
    let (kind, nlist) = match args.kind {
        KindArg::Flat => (IndexKind::Flat, 0),
        KindArg::Ivf => (IndexKind::Ivf, args.nlist),
    };
    rec.stage("load");
    let index = TokenIndex::build(
        &store,
        heads.as_ref().map(|h| &h.document),
        args.beta_d,
        kind,
        nlist,
        args.seed,
    )?;
    rec.stage("build");
    index.save(&args.out)?;
    rec.stage("write");

    let kept: Vec<usize> = (0..store.len())
        .map(|d| index.doc_tokens(d).len())
        .collect();
    let ratios: Vec<f64> = kept
        .iter()
        .enumerate()
        .map(|(d, &k)| k as f64 / store.get(d).len() as f64)
        .collect();
    println!("documents\t{}", store.len());
    println!("tokens\t{}", store.total_tokens());
    println!("entries\t{}", index.len());
    println!(
        "kept per document\tmin {}\tmean {:.2}\tmax {}\tmean fraction {:.4}",
        kept.iter().min().copied().unwrap_or(0),
        mean(kept.iter().map(|&k| k as f64)),
        kept.iter().max().copied().unwrap_or(0),
        mean(ratios)
    );
    if kind == IndexKind::Ivf {
        let sizes = index.list_sizes();
        println!(
            "cells\t{}\tnon-empty {}\tmin {}\tmax {}",
            sizes.len(),
            sizes.iter().filter(|&&s| s > 0).count(),
            sizes.iter().min().copied().unwrap_or(0),
            sizes.iter().max().copied().unwrap_or(0)
        );
    }
    let mut inputs: Vec<&Path> = vec![&args.store];
    inputs.extend(args.heads.as_deref());
    rec.finish(args, Some(args.seed), &inputs, &[&args.out])?;
    Ok(())
}

fn strategy_of(args: &SearchArgs) -> Result<AlignmentStrategy, Failure> {
    let s = match args.strategy {
        StrategyArg::TopK => AlignmentStrategy::TopK { k: args.k },
        StrategyArg::TopP => AlignmentStrategy::TopP { p: args.p },
        StrategyArg::FirstK => AlignmentStrategy::FirstK { k: args.k },
        StrategyArg::SingleVector => AlignmentStrategy::SingleVector,
        StrategyArg::ExactMatch => AlignmentStrategy::ExactMatch,
        StrategyArg::Differentiable => AlignmentStrategy::Differentiable {
            k: args.k,
            epsilon: args.retrieval.epsilon,
        },
    };
    s.validate()?;
    Ok(s)
}

pub fn search(args: &SearchArgs) -> Result<(), Failure> {
    let mut rec = Recorder::start("search");
    let strategy = strategy_of(args)?;
    let config = retrieval_config(&args.retrieval, strategy)?;
    let c = Collection::load(&args.index, &args.store, &args.queries)?;
    let heads = load_heads(args.retrieval.heads.as_ref())?;
    rec.stage("load");
    let retriever = Retriever::new(&c.index, &c.store, heads.as_ref(), &config)?;
    let runs: Vec<RankedList> = c
        .queries
        .iter()
        .map(|(qid, q)| retriever.retrieve(qid, q))
        .collect::<Result<_, _>>()?;
    rec.stage("retrieve");
    write_file(&args.out, format_run(&runs, &args.tag).as_bytes())?;
    let lines: usize = runs.iter().map(RankedList::len).sum();
    println!(
        "{} queries, {lines} run lines, strategy {strategy}, {:.2} ms/query",
        runs.len(),
        rec.stages()["retrieve"] / runs.len().max(1) as f64
    );
    let mut inputs: Vec<&Path> = vec![&args.index, &args.store, &args.queries];
    inputs.extend(args.retrieval.heads.as_deref());
    rec.finish(args, None, &inputs, &[&args.out])?;
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let rec = Recorder::start("eval");
    let metrics: Vec<Metric> = args
        .metric
        .iter()
        .map(|m| Metric::from_str(m))
        .collect::<Result<_, _>>()?;
    let runs = read_run(&args.run)?;
    let qrels = Qrels::read(&args.qrels)?;
    if runs.is_empty() {
        log::warn!(
            "run file {} is empty; every query scores 0",
            args.run.display()
        );
    }
    let judged = qrels.evaluable_query_ids();
    if judged.is_empty() {
        log::warn!(
            "qrels {} has no positive judgments; metrics are 0",
            args.qrels.display()
        );
    }
    let mut columns = Vec::with_capacity(metrics.len());
    for metric in &metrics {
        let per_query = evaluate_run(&runs, &qrels, *metric)?;
        println!("{metric}\tall\t{}", mean(per_query.values().copied()));
        columns.push(per_query);
    }
    if let Some(path) = &args.plot_out {
        let mut tsv = String::from("query_id");
        for m in &metrics {
            tsv += &format!("\t{m}");
        }
        tsv.push('\n');
        for q in &judged {
            tsv += q;
            for col in &columns {
                tsv += &format!("\t{:.6}", col[q]);
            }
            tsv.push('\n');
        }
        write_file(path, tsv.as_bytes())?;
        rec.finish(args, None, &[&args.run, &args.qrels], &[path])?;
    }
    Ok(())
}

pub fn adapt(args: &AdaptArgs) -> Result<(), Failure> {
    let mut rec = Recorder::start("adapt");
    let strategies = grid(&args.grid_k, &args.grid_p);
    if strategies.is_empty() {
        return Err(Failure::config("--grid-k and --grid-p are both empty"));
    }
    let configs: Vec<RetrievalConfig> = strategies
        .iter()
        .map(|&s| retrieval_config(&args.retrieval, s))
        .collect::<Result<_, _>>()?;
    let c = Collection::load(&args.index, &args.store, &args.queries)?;
    let qrels = Qrels::read(&args.qrels)?;
    let heads = load_heads(args.retrieval.heads.as_ref())?;
    let mut annotated = Vec::new();
    for q in qrels.evaluable_query_ids() {
        match c.queries.position(&q) {
            Some(pos) => annotated.push((q, pos)),
            None => log::warn!(
                "annotated query {q:?} is missing from {}",
                args.queries.display()
            ),
        }
    }
    rec.stage("load");

    let retrievers: Vec<Retriever<'_>> = configs
        .iter()
        .map(|config| Retriever::new(&c.index, &c.store, heads.as_ref(), config))
        .collect::<Result<_, _>>()?;
    // The first stage does not depend on the alignment rule, so candidates
    // are gathered once and only refinement is repeated per strategy.
    let candidates: Vec<Vec<usize>> = annotated
        .iter()
        .map(|&(_, pos)| retrievers[0].candidates(c.queries.get(pos)))
        .collect::<Result<_, _>>()?;
    rec.stage("candidates");
    let slot: HashMap<&str, usize> = annotated
        .iter()
        .enumerate()
        .map(|(i, (q, _))| (q.as_str(), i))
        .collect();
    let ids: Vec<String> = annotated.iter().map(|(q, _)| q.clone()).collect();
    let retrieve_fn = |qid: &str, strategy: &AlignmentStrategy| {
        let i = slot[qid];
        let g = strategies
            .iter()
            .position(|s| s == strategy)
            .expect("grid strategy");
        retrievers[g].refine(qid, c.queries.get(annotated[i].1), &candidates[i])
    };
    let report = adapt_alignment(
        &ids,
        &qrels,
        &strategies,
        retrieve_fn,
        args.fold_size,
        args.seed,
    )?;
    rec.stage("refine");

    write_file(&args.out, (report.to_json() + "\n").as_bytes())?;
    for f in &report.folds {
        println!(
            "fold {}\t{}\ttrain {:.4}\theld-out {:.4}",
            f.fold, f.chosen_strategy, f.train_ndcg10, f.heldout_ndcg10
        );
    }
    println!("held-out nDCG@10\t{:.4} ± {:.4}", report.mean, report.std);
    let oracle = report.oracle();
    println!("exhaustive best\t{}\t{:.4}", oracle.strategy, oracle.ndcg10);
    let mut outputs: Vec<&Path> = vec![&args.out];
    if let Some(path) = &args.plot_out {
        write_file(path, report.to_tsv().as_bytes())?;
        outputs.push(path);
    }
    let mut inputs: Vec<&Path> = vec![&args.index, &args.store, &args.queries, &args.qrels];
    inputs.extend(args.retrieval.heads.as_deref());
    rec.finish(args, Some(args.seed), &inputs, &outputs)?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), Failure> {
    let mut rec = Recorder::start("train");
    let config = TrainConfig {
        learning_rate: args.lr,
        steps: args.steps,
        batch_queries: args.batch_queries,
        negatives_per_query: args.negatives,
        epsilon: args.epsilon,
        alpha_q: args.alpha_q,
        alpha_d: args.alpha_d,
        unroll_iters: args.unroll_iters,
        seed: args.seed,
        temperature: args.temperature,
        init_scale: args.init_scale,
        ..TrainConfig::default()
    };
    config.validate()?;
    let store = read_store(&args.store)?;
    let queries = read_store(&args.queries)?;
    let qrels = Qrels::read(&args.qrels)?;
    rec.stage("load");
    let outcome = train_salience(&store, &queries.to_records(), &qrels, &config)?;
    rec.stage("train");
    outcome.heads.save(&args.out)?;
    let mut outputs: Vec<&Path> = vec![&args.out];
    if let Some(path) = &args.loss_out {
        write_file(path, outcome.loss_csv().as_bytes())?;
        outputs.push(path);
    }
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        println!(
            "{} steps, loss {first:.6} -> {last:.6}",
            outcome.losses.len()
        );
    }
    rec.finish(
        args,
        Some(args.seed),
        &[&args.store, &args.queries, &args.qrels],
        &outputs,
    )?;
    Ok(())
}
