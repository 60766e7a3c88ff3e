//! Window-by-window force prediction from raw interrogator readings.
//!
//! Both modes push samples through the same causal preprocessor, so their
//! output is identical; `--stream` parses input as it arrives and flushes
//! each row as soon as its window is complete.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fbg_core::dataio::{parse_series_csv, read_checkpoint, read_series_csv, INTERROGATOR_HEADER};
use fbg_core::models::StreamState;
use fbg_core::preprocess::{StreamPreprocessor, StreamWindow};

fn emit(
    windows: Vec<StreamWindow>,
    state: &mut StreamState<'_>,
    out: &mut impl Write,
    flush: bool,
    rows: &mut usize,
) -> Result<()> {
    for w in windows {
        let pred = state.push(&w.x)?;
        writeln!(out, "{:?},{:?}", w.time, pred)?;
        if flush {
            out.flush()?;
        }
        *rows += 1;
    }
    Ok(())
}

fn open(input: &Path) -> Result<Box<dyn Read>> {
    if input.as_os_str() == "-" {
        Ok(Box::new(io::stdin().lock()))
    } else {
        Ok(Box::new(File::open(input).with_context(|| format!("opening {}", input.display()))?))
    }
}

pub fn run(ckpt: &Path, input: &Path, stream: bool) -> Result<()> {
    let (model, _) = read_checkpoint(ckpt)?;
    let mut state = StreamState::new(&model);
    let mut pre = StreamPreprocessor::new();
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut rows = 0;
    writeln!(out, "time,pred")?;

    if stream {
        out.flush()?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(open(input)?);
        let header = rdr.headers().context("reading header")?.clone();
        if header.iter().ne(INTERROGATOR_HEADER) {
            bail!("line 1: expected header `{}`", INTERROGATOR_HEADER.join(","));
        }
        let mut rec = csv::StringRecord::new();
        while rdr.read_record(&mut rec)? {
            let line = rec.position().map_or(0, |p| p.line());
            let vals = rec
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| anyhow!("line {line}: invalid number `{c}`")))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != INTERROGATOR_HEADER.len() {
                bail!("line {line}: expected {} fields, found {}", INTERROGATOR_HEADER.len(), vals.len());
            }
            let ready = pre.push(vals[0], &vals[1..]).with_context(|| format!("line {line}"))?;
            emit(ready, &mut state, &mut out, true, &mut rows)?;
        }
    } else {
        let series = if input.as_os_str() == "-" {
            let mut bytes = Vec::new();
            io::stdin().read_to_end(&mut bytes)?;
            parse_series_csv(&bytes, Path::new("<stdin>"), &INTERROGATOR_HEADER)?
        } else {
            read_series_csv(input, &INTERROGATOR_HEADER)?
        };
        for (t, r) in series.timestamps().iter().zip(series.rows()) {
            let ready = pre.push(*t, r)?;
            emit(ready, &mut state, &mut out, false, &mut rows)?;
        }
    }
    let rest = pre.finish()?;
    emit(rest, &mut state, &mut out, stream, &mut rows)?;
    out.flush()?;
    if rows == 0 {
        eprintln!("warning: input holds less than one complete window; no predictions");
    }
    Ok(())
}
