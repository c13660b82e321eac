//! Interpretability printout for one query-document pair.

use std::path::Path;

use sparsealign::align::{dot, score_pair, AlignmentStrategy};
use sparsealign::retrieve::{brute_force_retrieve, RetrievalConfig};
use sparsealign::salience::{prune_select, raw_salience, SalienceHead};
use sparsealign::store::{read_store, TokenView};

use crate::commands::load_heads;
use crate::failure::Failure;
use crate::ExplainArgs;

/// Token labels by vocabulary id.
struct Vocab(Vec<String>);

impl Vocab {
    fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self(Vec::new()));
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        Ok(Self(text.lines().map(str::to_string).collect()))
    }

    fn label(&self, id: u32) -> String {
        self.0
            .get(id as usize)
            .cloned()
            .unwrap_or_else(|| format!("#{id}"))
    }
}

fn salience_of(
    tokens: TokenView<'_>,
    head: Option<&SalienceHead>,
    side: &str,
) -> Result<Vec<f64>, Failure> {
    match (head, tokens.salience()) {
        (Some(h), _) => Ok(raw_salience(tokens, h)?),
        (None, Some(s)) => Ok(s.iter().map(|&v| f64::from(v)).collect()),
        (None, None) => Err(Failure::config(format!(
            "{side} tokens carry no stored salience; pass --heads"
        ))),
    }
}

/// The `ceil(frac * m)` most salient positions, most salient first.
fn most_salient(salience: &[f64], frac: f64) -> Result<Vec<usize>, Failure> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Failure::config(format!(
            "token fraction must lie in (0, 1], got {frac}"
        )));
    }
    let mut kept = prune_select(salience, frac);
    kept.sort_by(|&a, &b| salience[b].total_cmp(&salience[a]).then(a.cmp(&b)));
    Ok(kept)
}

pub fn explain(args: &ExplainArgs) -> Result<(), Failure> {
    let store = read_store(&args.store)?;
    let queries = read_store(&args.queries)?;
    let heads = load_heads(args.heads.as_ref())?;
    let vocab = Vocab::load(args.vocab.as_deref())?;
    let query = queries.get_by_id(&args.query_id).ok_or_else(|| {
        Failure::config(format!(
            "query {:?} not found in {}",
            args.query_id,
            args.queries.display()
        ))
    })?;
    let doc_id = match &args.doc_id {
        Some(id) => id.clone(),
        None => {
            let config = RetrievalConfig {
                final_top_n: 1,
                ..RetrievalConfig::default()
            };
            let best = brute_force_retrieve(&store, &args.query_id, query, None, &config)?;
            best.hits
                .first()
                .map(|h| h.doc_id.clone())
                .ok_or_else(|| Failure::config("the store is empty"))?
        }
    };
    let doc = store.get_by_id(&doc_id).ok_or_else(|| {
        Failure::config(format!(
            "document {doc_id:?} not found in {}",
            args.store.display()
        ))
    })?;

    let q_sal = salience_of(query, heads.as_ref().map(|h| &h.query), "query")?;
    let d_sal = salience_of(doc, heads.as_ref().map(|h| &h.document), "document")?;
    let q_shown = most_salient(&q_sal, args.top_query_frac)?;
    let d_shown = most_salient(&d_sal, args.top_doc_frac)?;
    let score = score_pair(query, doc, &AlignmentStrategy::COLBERT, true, None)?.score;

    println!(
        "query {} -> document {doc_id} (top-1 score {score:.4})",
        args.query_id
    );
    println!(
        "query tokens: {} of {} by salience",
        q_shown.len(),
        query.len()
    );
    for &i in &q_shown {
        // Top-1 alignment: the most similar document token, lowest index on ties.
        let (j, sim) = doc.rows().map(|d| dot(query.row(i), d)).enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (j, s)| if s > best.1 { (j, s) } else { best },
        );
        println!(
            "  q[{i}]\t{}\tsalience {:.4}\t-> d[{j}]\t{}\tsim {sim:.4}",
            vocab.label(query.token_ids()[i]),
            q_sal[i],
            vocab.label(doc.token_ids()[j])
        );
    }
    println!(
        "document tokens: {} of {} by salience",
        d_shown.len(),
        doc.len()
    );
    for &j in &d_shown {
        println!(
            "  d[{j}]\t{}\tsalience {:.4}",
            vocab.label(doc.token_ids()[j]),
            d_sal[j]
        );
    }
    Ok(())
}
