//! On-disk formats: the pair CSV (`block,a,b,g1,...,gK[,truth]`), chain and
//! posterior CSVs, key=value diagnostic reports, and JSON sidecars.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::Serialize;

use crate::blcm::ChainDraws;
use crate::diagnostics::{AcceptanceEntry, PsrfReport};
use crate::error::{Error, Result};
use crate::hblcm::BlockPosterior;
use crate::pattern::{BlockData, MAX_FIELDS};
use crate::synth::{generate_block_pairs, SynthConfig};

/// Streams the generated pairs of `config` as CSV, one row per pair.
///
/// Pairs are regenerated from the seed rather than held in memory; blocks
/// are written in order, pairs within a block in (a, b) order.
pub fn write_pairs_csv<W: Write>(w: W, config: &SynthConfig, include_truth: bool) -> Result<()> {
    config.validate()?;
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = vec!["block".into(), "a".into(), "b".into()];
    header.extend((1..=config.k).map(|i| format!("g{i}")));
    if include_truth {
        header.push("truth".into());
    }
    out.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for block_id in 0..config.s {
        let (_, pairs) = generate_block_pairs(config, block_id);
        for p in &pairs {
            row.clear();
            row.push(p.block.to_string());
            row.push(p.a.to_string());
            row.push(p.b.to_string());
            for field in 0..config.k {
                row.push(((p.pattern >> field & 1) as u8).to_string());
            }
            if include_truth {
                row.push((p.is_match as u8).to_string());
            }
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a pair CSV back into per-block pattern counts.
///
/// The field count K is inferred from the `g1..gK` header columns; a
/// trailing `truth` column is optional. Every block must contain its
/// complete cross product of pairs.
pub fn read_pairs_csv<R: Read>(r: R) -> Result<Vec<BlockData>> {
    let mut reader = csv::Reader::from_reader(r);
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 4 || cols[0] != "block" || cols[1] != "a" || cols[2] != "b" {
        return Err(Error::Data(
            "pair CSV header must start with block,a,b,g1,...".into(),
        ));
    }
    let has_truth = *cols.last().unwrap() == "truth";
    let k = cols.len() - 3 - has_truth as usize;
    if k < 1 || k > MAX_FIELDS {
        return Err(Error::Data(format!(
            "pair CSV must have 1..={MAX_FIELDS} agreement columns, found {k}"
        )));
    }
    for (i, col) in cols[3..3 + k].iter().enumerate() {
        if *col != format!("g{}", i + 1) {
            return Err(Error::Data(format!(
                "expected agreement column g{}, found {col}",
                i + 1
            )));
        }
    }

    struct Partial {
        n_a: usize,
        n_b: usize,
        counts: Vec<u64>,
        truth: Vec<u64>,
    }
    let mut blocks: BTreeMap<usize, Partial> = BTreeMap::new();
    let parse_cell = |cell: &str, what: &str| -> Result<usize> {
        cell.parse()
            .map_err(|_| Error::Data(format!("invalid {what} value {cell:?}")))
    };
    for record in reader.records() {
        let record = record?;
        if record.len() != cols.len() {
            return Err(Error::Data(format!(
                "row has {} fields, expected {}",
                record.len(),
                cols.len()
            )));
        }
        let block_id = parse_cell(&record[0], "block")?;
        let a = parse_cell(&record[1], "a")?;
        let b = parse_cell(&record[2], "b")?;
        let mut pattern = 0usize;
        for field in 0..k {
            match &record[3 + field] {
                "0" => {}
                "1" => pattern |= 1 << field,
                other => {
                    return Err(Error::Data(format!(
                        "agreement values must be 0 or 1, found {other:?}"
                    )))
                }
            }
        }
        let entry = blocks.entry(block_id).or_insert_with(|| Partial {
            n_a: 0,
            n_b: 0,
            counts: vec![0; 1 << k],
            truth: vec![0; 1 << k],
        });
        entry.n_a = entry.n_a.max(a + 1);
        entry.n_b = entry.n_b.max(b + 1);
        entry.counts[pattern] += 1;
        if has_truth {
            match &record[3 + k] {
                "0" => {}
                "1" => entry.truth[pattern] += 1,
                other => {
                    return Err(Error::Data(format!(
                        "truth values must be 0 or 1, found {other:?}"
                    )))
                }
            }
        }
    }
    if blocks.is_empty() {
        return Err(Error::Data("pair CSV contains no rows".into()));
    }
    blocks
        .into_iter()
        .map(|(block_id, p)| {
            BlockData::new(
                block_id,
                p.n_a,
                p.n_b,
                k,
                p.counts,
                has_truth.then_some(p.truth),
            )
        })
        .collect()
}

/// Writes retained chain draws: `chain,draw,<param names>`.
pub fn write_chains_csv<W: Write>(w: W, chains: &[ChainDraws]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let names = chains
        .first()
        .ok_or_else(|| Error::Data("no chains to write".into()))?
        .names
        .clone();
    let mut header: Vec<String> = vec!["chain".into(), "draw".into()];
    header.extend(names);
    out.write_record(&header)?;
    for (c, chain) in chains.iter().enumerate() {
        for (d, row) in chain.rows.iter().enumerate() {
            let mut record: Vec<String> = vec![c.to_string(), d.to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&record)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a chain CSV written by [`write_chains_csv`] back into per-chain
/// draws.
pub fn read_chains_csv<R: Read>(r: R) -> Result<Vec<ChainDraws>> {
    let mut reader = csv::Reader::from_reader(r);
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[0] != "chain" || cols[1] != "draw" {
        return Err(Error::Data(
            "chain CSV header must start with chain,draw".into(),
        ));
    }
    let names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let mut chains: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != cols.len() {
            return Err(Error::Data(format!(
                "row has {} fields, expected {}",
                record.len(),
                cols.len()
            )));
        }
        let chain: usize = record[0]
            .parse()
            .map_err(|_| Error::Data(format!("invalid chain index {:?}", &record[0])))?;
        let row: Vec<f64> = record
            .iter()
            .skip(2)
            .map(|cell| {
                cell.parse()
                    .map_err(|_| Error::Data(format!("invalid draw value {cell:?}")))
            })
            .collect::<Result<_>>()?;
        chains.entry(chain).or_default().push(row);
    }
    if chains.is_empty() {
        return Err(Error::Data("chain CSV contains no draws".into()));
    }
    Ok(chains
        .into_values()
        .map(|rows| ChainDraws {
            names: names.clone(),
            rows,
        })
        .collect())
}

/// Writes per-block posterior summaries: `block,param,mean,sd`.
pub fn write_block_posteriors_csv<W: Write>(w: W, blocks: &[BlockPosterior]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["block", "param", "mean", "sd"])?;
    for b in blocks {
        for (j, name) in b.names.iter().enumerate() {
            out.write_record([
                b.block_id.to_string(),
                name.clone(),
                b.mean[j].to_string(),
                b.sd[j].to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes diagnostics as `key=value` lines: per-parameter PSRF values, the
/// maximum, and (when present) MH acceptance entries.
pub fn write_diag<W: Write>(
    mut w: W,
    psrf: Option<&PsrfReport>,
    acceptance: &[AcceptanceEntry],
) -> Result<()> {
    if let Some(report) = psrf {
        for (name, value) in report.names.iter().zip(&report.values) {
            writeln!(w, "psrf_{name}={value:.6}")?;
        }
        writeln!(w, "max_psrf={:.6}", report.max())?;
    }
    for e in acceptance {
        match e.rate {
            Some(rate) => writeln!(w, "accept_{}={:.6}", e.family, rate)?,
            None => writeln!(w, "accept_{}=none", e.family)?,
        }
        writeln!(w, "h_{}={:.6}", e.family, e.h)?;
        writeln!(w, "flagged_{}={}", e.family, e.flagged as u8)?;
    }
    Ok(())
}

/// Writes a pretty-printed JSON sidecar with a trailing newline.
pub fn write_json<W: Write, T: Serialize>(mut w: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;

    fn tiny_config() -> SynthConfig {
        SynthConfig {
            s: 3,
            block_size: 4,
            ..SynthConfig::scenario2_defaults(77)
        }
    }

    #[test]
    fn pairs_roundtrip_matches_generator() {
        let config = tiny_config();
        let mut buf = Vec::new();
        write_pairs_csv(&mut buf, &config, true).unwrap();
        let blocks = read_pairs_csv(buf.as_slice()).unwrap();
        let direct = generate(&config).unwrap().blocks;
        assert_eq!(blocks.len(), direct.len());
        for (a, b) in blocks.iter().zip(&direct) {
            assert_eq!(a.block_id, b.block_id);
            assert_eq!(a.n_a, b.n_a);
            assert_eq!(a.pattern_counts, b.pattern_counts);
            assert_eq!(a.truth_match_counts, b.truth_match_counts);
        }
    }

    #[test]
    fn pairs_without_truth_column() {
        let config = tiny_config();
        let mut buf = Vec::new();
        write_pairs_csv(&mut buf, &config, false).unwrap();
        let header = String::from_utf8_lossy(&buf);
        assert!(header.starts_with("block,a,b,g1,g2,g3,g4,g5,g6,g7\n"));
        let blocks = read_pairs_csv(buf.as_slice()).unwrap();
        assert!(blocks.iter().all(|b| b.truth_match_counts.is_none()));
    }

    #[test]
    fn pairs_csv_is_deterministic() {
        let config = tiny_config();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_pairs_csv(&mut a, &config, true).unwrap();
        write_pairs_csv(&mut b, &config, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn read_rejects_bad_input() {
        assert!(read_pairs_csv("x,y\n1,2\n".as_bytes()).is_err());
        assert!(read_pairs_csv("block,a,b,g1\n0,0,0,2\n".as_bytes()).is_err());
        assert!(read_pairs_csv("block,a,b,g1\n".as_bytes()).is_err());
        // incomplete cross product: 2x2 block with 3 rows
        let partial = "block,a,b,g1\n0,0,0,1\n0,0,1,0\n0,1,0,1\n";
        assert!(read_pairs_csv(partial.as_bytes()).is_err());
    }

    #[test]
    fn chains_csv_layout() {
        let chains = vec![ChainDraws {
            names: vec!["p_m".into(), "p_m1".into()],
            rows: vec![vec![0.01, 0.5], vec![0.02, 0.75]],
        }];
        let mut buf = Vec::new();
        write_chains_csv(&mut buf, &chains).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "chain,draw,p_m,p_m1\n0,0,0.01,0.5\n0,1,0.02,0.75\n");
    }

    #[test]
    fn chains_csv_roundtrip() {
        let chains = vec![
            ChainDraws {
                names: vec!["p_m".into(), "p_m1".into()],
                rows: vec![vec![0.01, 0.5], vec![0.02, 0.75]],
            },
            ChainDraws {
                names: vec!["p_m".into(), "p_m1".into()],
                rows: vec![vec![0.03, 0.25], vec![0.04, 0.125]],
            },
        ];
        let mut buf = Vec::new();
        write_chains_csv(&mut buf, &chains).unwrap();
        let back = read_chains_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].names, chains[0].names);
        assert_eq!(back[1].rows, chains[1].rows);
    }

    #[test]
    fn diag_key_value_output() {
        let report = PsrfReport {
            names: vec!["p_m".into()],
            values: vec![1.0321],
        };
        let entries = vec![AcceptanceEntry {
            family: "m".into(),
            rate: Some(0.34),
            proposals: 100,
            h: 0.5,
            flagged: false,
        }];
        let mut buf = Vec::new();
        write_diag(&mut buf, Some(&report), &entries).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("psrf_p_m=1.032100\n"));
        assert!(text.contains("max_psrf=1.032100\n"));
        assert!(text.contains("accept_m=0.340000\n"));
        assert!(text.contains("flagged_m=0\n"));
    }
}
