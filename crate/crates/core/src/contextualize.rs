//! Column-to-text rendering.
//!
//! A column and its metadata are serialized into one text sequence following
//! one of seven [`Pattern`]s. When the rendering exceeds the encoder's token
//! budget, the cells are replaced by a sample (most frequent values first by
//! default) so that the rendered text fits.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Column, DocFreq};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Col,
    ColnameCol,
    ColnameColContext,
    ColnameStatCol,
    TitleColnameCol,
    TitleColnameColContext,
    #[default]
    TitleColnameStatCol,
}

impl Pattern {
    pub const ALL: [Pattern; 7] = [
        Pattern::Col,
        Pattern::ColnameCol,
        Pattern::ColnameColContext,
        Pattern::ColnameStatCol,
        Pattern::TitleColnameCol,
        Pattern::TitleColnameColContext,
        Pattern::TitleColnameStatCol,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Col => "col",
            Pattern::ColnameCol => "colname-col",
            Pattern::ColnameColContext => "colname-col-context",
            Pattern::ColnameStatCol => "colname-stat-col",
            Pattern::TitleColnameCol => "title-colname-col",
            Pattern::TitleColnameColContext => "title-colname-col-context",
            Pattern::TitleColnameStatCol => "title-colname-stat-col",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown pattern {s:?}")))
    }
}

/// Unit used for the cell length statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatUnit {
    /// Unicode scalar values per cell.
    #[default]
    Chars,
    /// Whitespace-separated words per cell.
    Words,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnStats {
    pub n: usize,
    pub max_len: usize,
    pub min_len: usize,
    pub avg_len: f64,
}

impl ColumnStats {
    /// `max, min, avg` as rendered inside the stat patterns.
    pub fn rendered(&self) -> String {
        format!("{}, {}, {:.1}", self.max_len, self.min_len, self.avg_len)
    }
}

pub fn compute_stats(col: &Column, unit: StatUnit) -> Result<ColumnStats> {
    stats_of(col.cells(), unit).ok_or_else(|| Error::EmptyColumn(col.id.clone()))
}

fn stats_of(cells: &[String], unit: StatUnit) -> Option<ColumnStats> {
    if cells.is_empty() {
        return None;
    }
    let lens = cells.iter().map(|c| match unit {
        StatUnit::Chars => c.chars().count(),
        StatUnit::Words => c.split_whitespace().count(),
    });
    let (mut max, mut min, mut sum) = (0, usize::MAX, 0);
    for l in lens {
        max = max.max(l);
        min = min.min(l);
        sum += l;
    }
    Some(ColumnStats {
        n: cells.len(),
        max_len: max,
        min_len: min,
        avg_len: sum as f64 / cells.len() as f64,
    })
}

/// Counts the tokens an encoder would see for a text.
pub trait TokenCounter {
    fn count_tokens(&self, text: &str) -> Result<usize>;
}

/// Whitespace tokenization, the built-in embedder's view of length.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokens;

impl TokenCounter for WhitespaceTokens {
    fn count_tokens(&self, text: &str) -> Result<usize> {
        Ok(text.split_whitespace().count())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Highest document frequency first, ties in original order.
    Frequency,
    /// Seeded uniform shuffle.
    Random { seed: u64 },
    /// Original cell order.
    Truncate,
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frequency" => Ok(Sampling::Frequency),
            "truncate" => Ok(Sampling::Truncate),
            _ => match s.strip_prefix("random:") {
                Some(seed) => seed
                    .parse()
                    .map(|seed| Sampling::Random { seed })
                    .map_err(|_| Error::InvalidParam(format!("bad random seed in {s:?}"))),
                None => Err(Error::InvalidParam(format!("unknown sampling strategy {s:?}"))),
            },
        }
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampling::Frequency => f.write_str("frequency"),
            Sampling::Random { seed } => write!(f, "random:{seed}"),
            Sampling::Truncate => f.write_str("truncate"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleStrategy {
    pub sampling: Sampling,
    pub token_budget: usize,
}

impl SampleStrategy {
    pub const MIN_BUDGET: usize = 8;

    pub fn new(sampling: Sampling, token_budget: usize) -> Result<Self> {
        if token_budget < Self::MIN_BUDGET {
            return Err(Error::InvalidParam(format!(
                "token budget {token_budget} is below {}",
                Self::MIN_BUDGET
            )));
        }
        Ok(SampleStrategy {
            sampling,
            token_budget,
        })
    }
}

impl Default for SampleStrategy {
    fn default() -> Self {
        SampleStrategy {
            sampling: Sampling::Frequency,
            token_budget: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnText {
    pub text: String,
    pub pattern: Pattern,
    /// Whether the cells were sampled to fit the token budget.
    pub truncated: bool,
}

/// Everything that determines a rendering apart from the column itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RenderOptions {
    pub pattern: Pattern,
    pub strategy: SampleStrategy,
    #[serde(default)]
    pub stat_unit: StatUnit,
}

/// Orders cells the way `sampling` wants to consume them.
pub fn order_cells<'a>(cells: &'a [String], sampling: Sampling, df: &dyn DocFreq) -> Vec<&'a str> {
    let mut out: Vec<&str> = cells.iter().map(String::as_str).collect();
    match sampling {
        Sampling::Truncate => {}
        Sampling::Frequency => {
            let freqs: Vec<u32> = cells.iter().map(|c| df.doc_freq(c)).collect();
            let mut idx: Vec<usize> = (0..cells.len()).collect();
            // stable: equal frequencies keep their original order
            idx.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]));
            out = idx.into_iter().map(|i| cells[i].as_str()).collect();
        }
        Sampling::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.shuffle(&mut rng);
        }
    }
    out
}

/// Greedy fill: cells in strategy order are taken until the next one would
/// push the summed token count past `budget`. A lone first cell that is
/// already over budget is cut down to its first `budget` tokens.
pub fn sample(
    cells: &[String],
    sampling: Sampling,
    df: &dyn DocFreq,
    budget: usize,
    counter: &dyn TokenCounter,
) -> Result<Vec<String>> {
    if budget == 0 {
        return Err(Error::InvalidParam("sample budget must be positive".into()));
    }
    let ordered = order_cells(cells, sampling, df);
    let mut out = Vec::new();
    let mut used = 0;
    for cell in ordered {
        let n = counter.count_tokens(cell)?;
        if used + n > budget {
            if out.is_empty() {
                out.push(truncate_tokens(cell, budget, counter)?);
            }
            break;
        }
        used += n;
        out.push(cell.to_owned());
    }
    Ok(out)
}

/// Longest whitespace-token prefix of `text` that fits `budget`.
fn truncate_tokens(text: &str, budget: usize, counter: &dyn TokenCounter) -> Result<String> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let (mut lo, mut hi) = (0, tokens.len());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if counter.count_tokens(&tokens[..mid].join(" "))? <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(tokens[..lo].join(" "))
}

fn assemble(col: &Column, pattern: Pattern, cells: &[&str], stats: &str) -> String {
    let body = cells.join(", ");
    let colname_col = || format!("{} : {}.", col.column_name, body);
    let stat_col = || format!("{} contains {} values ({}): {}.", col.column_name, col.len(), stats, body);
    let with_title = |s: String| {
        if col.table_title.is_empty() {
            s
        } else {
            format!("{}. {}", col.table_title, s)
        }
    };
    let with_context = |s: String| {
        if col.table_context.is_empty() {
            s
        } else {
            format!("{} {}", s, col.table_context)
        }
    };
    match pattern {
        Pattern::Col => body,
        Pattern::ColnameCol => colname_col(),
        Pattern::ColnameColContext => with_context(colname_col()),
        Pattern::ColnameStatCol => stat_col(),
        Pattern::TitleColnameCol => with_title(colname_col()),
        Pattern::TitleColnameColContext => with_context(with_title(colname_col())),
        Pattern::TitleColnameStatCol => with_title(stat_col()),
    }
}

/// Renders with whitespace token counting.
pub fn render(col: &Column, opts: &RenderOptions, df: &dyn DocFreq) -> Result<ColumnText> {
    render_with(col, opts, df, &WhitespaceTokens)
}

/// Renders `col`, sampling its cells when the full text would exceed the
/// token budget. Statistics always describe the whole column.
pub fn render_with(
    col: &Column,
    opts: &RenderOptions,
    df: &dyn DocFreq,
    counter: &dyn TokenCounter,
) -> Result<ColumnText> {
    render_detailed(col, opts, df, counter).map(|r| r.text)
}

/// A rendering together with the cells that made it into the text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: ColumnText,
    /// Cells in the order they were rendered. Empty when even a single cell
    /// did not fit and the text itself was cut to the budget.
    pub cells: Vec<String>,
}

pub fn render_detailed(
    col: &Column,
    opts: &RenderOptions,
    df: &dyn DocFreq,
    counter: &dyn TokenCounter,
) -> Result<Rendered> {
    let stats = compute_stats(col, opts.stat_unit)?.rendered();
    let budget = opts.strategy.token_budget;
    let all: Vec<&str> = col.cells().iter().map(String::as_str).collect();
    let full = assemble(col, opts.pattern, &all, &stats);
    if counter.count_tokens(&full)? <= budget {
        return Ok(Rendered {
            text: ColumnText {
                text: full,
                pattern: opts.pattern,
                truncated: false,
            },
            cells: col.cells().to_vec(),
        });
    }

    let ordered = order_cells(col.cells(), opts.strategy.sampling, df);
    // rendered length only grows with the prefix, so search for the longest fit
    let (mut lo, mut hi) = (0, ordered.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        let text = assemble(col, opts.pattern, &ordered[..mid], &stats);
        if counter.count_tokens(&text)? <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let text = if lo > 0 {
        assemble(col, opts.pattern, &ordered[..lo], &stats)
    } else {
        let one = assemble(col, opts.pattern, &ordered[..1], &stats);
        truncate_tokens(&one, budget, counter)?
    };
    Ok(Rendered {
        text: ColumnText {
            text,
            pattern: opts.pattern,
            truncated: true,
        },
        cells: ordered[..lo].iter().map(|s| s.to_string()).collect(),
    })
}
