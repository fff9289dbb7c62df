//! Plain-text ablation reports.
//!
//! Layout: a `schema=` line, a `fixtures=` line, a `columns=` line, then one
//! tab-separated row per (cell, seed). Floats use Rust's shortest round-trip
//! formatting so a report parses back to the same values.

use crate::error::CliError;

pub const SCHEMA: &str = "fia-ablation/1";

pub const COLUMNS: [&str; 14] = [
    "cell",
    "fri_mode",
    "fij_enabled",
    "noise_mode",
    "filter_sigma",
    "fij_blocks",
    "seed",
    "status",
    "mse_bg",
    "psnr_bg",
    "ssim",
    "spectral_distance",
    "filter_digest",
    "error",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RowMetrics {
    /// Mean over fixtures of the background-masked MSE.
    pub mse_bg: f64,
    /// PSNR of `mse_bg`.
    pub psnr_bg: f64,
    pub ssim: f64,
    pub spectral_distance: f64,
    /// Short hash of the low-pass mask the cell used.
    pub filter_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub cell: usize,
    pub fri_mode: String,
    pub fij_enabled: bool,
    pub noise_mode: String,
    pub filter_sigma: f64,
    pub fij_blocks: Option<(usize, usize)>,
    pub seed: u64,
    pub outcome: Result<RowMetrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub fixtures: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn clean(text: &str) -> String {
    let s: String = text
        .chars()
        .map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    if s.is_empty() {
        "-".into()
    } else {
        s
    }
}

impl ReportRow {
    fn fields(&self) -> Vec<String> {
        let blocks = self
            .fij_blocks
            .map_or_else(|| "none".to_string(), |(lo, hi)| format!("{lo}-{hi}"));
        let mut out = vec![
            self.cell.to_string(),
            self.fri_mode.clone(),
            self.fij_enabled.to_string(),
            self.noise_mode.clone(),
            format!("{:?}", self.filter_sigma),
            blocks,
            self.seed.to_string(),
        ];
        match &self.outcome {
            Ok(m) => out.extend([
                "ok".into(),
                format!("{:?}", m.mse_bg),
                format!("{:?}", m.psnr_bg),
                format!("{:?}", m.ssim),
                format!("{:?}", m.spectral_distance),
                m.filter_digest.clone(),
                "-".into(),
            ]),
            Err(e) => {
                out.push("failed".into());
                out.extend(std::iter::repeat_n("-".to_string(), 5));
                out.push(clean(e));
            }
        }
        out
    }

    fn parse(line: &str, lineno: usize) -> Result<Self, CliError> {
        let bad = |what: &str| CliError::Io(format!("report line {lineno}: bad {what}"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != COLUMNS.len() {
            return Err(bad("column count"));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(COLUMNS[i]));
        let fij_blocks = match f[5] {
            "none" => None,
            s => {
                let (lo, hi) = s.split_once('-').ok_or_else(|| bad("fij_blocks"))?;
                Some((
                    lo.parse().map_err(|_| bad("fij_blocks"))?,
                    hi.parse().map_err(|_| bad("fij_blocks"))?,
                ))
            }
        };
        let outcome = match f[7] {
            "ok" => Ok(RowMetrics {
                mse_bg: num(8)?,
                psnr_bg: num(9)?,
                ssim: num(10)?,
                spectral_distance: num(11)?,
                filter_digest: f[12].to_string(),
            }),
            "failed" => Err(f[13].to_string()),
            _ => return Err(bad("status")),
        };
        Ok(Self {
            cell: f[0].parse().map_err(|_| bad("cell"))?,
            fri_mode: f[1].to_string(),
            fij_enabled: f[2].parse().map_err(|_| bad("fij_enabled"))?,
            noise_mode: f[3].to_string(),
            filter_sigma: num(4)?,
            fij_blocks,
            seed: f[6].parse().map_err(|_| bad("seed"))?,
            outcome,
        })
    }
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mut out = format!(
            "schema={SCHEMA}\nfixtures={}\ncolumns={}\n",
            self.fixtures.join(","),
            COLUMNS.join("\t")
        );
        for row in &self.rows {
            out.push_str(&row.fields().join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut lines = text.lines().enumerate();
        let mut header = |key: &str| -> Result<String, CliError> {
            let (_, line) = lines
                .next()
                .ok_or_else(|| CliError::Io(format!("report is missing its {key} line")))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| CliError::Io(format!("expected {key}= line, got {line:?}")))
        };
        let schema = header("schema")?;
        if schema != SCHEMA {
            return Err(CliError::Io(format!("unsupported report schema {schema:?}")));
        }
        let fixtures = header("fixtures")?.split(',').map(str::to_string).collect();
        if header("columns")? != COLUMNS.join("\t") {
            return Err(CliError::Io("report columns do not match this version".into()));
        }
        let rows = lines
            .map(|(i, line)| ReportRow::parse(line, i + 1))
            .collect::<Result<_, _>>()?;
        Ok(Self { fixtures, rows })
    }
}
