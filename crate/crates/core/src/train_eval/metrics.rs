use std::fmt::Write as _;
use std::io::{self, Write};

pub const METRICS_HEADER: &str = "step,split,exit,loss,ppl,cycle,zero_attn_mean,gate_mean,lr,avg_loop";

/// One metrics line; `None` fields are written empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRow {
    pub step: u64,
    pub split: String,
    /// 1-based exit (the cycle count it follows).
    pub exit: Option<usize>,
    pub loss: Option<f64>,
    pub ppl: Option<f64>,
    /// 1-based cycle.
    pub cycle: Option<usize>,
    pub zero_attn_mean: Option<f64>,
    pub gate_mean: Option<f64>,
    pub lr: Option<f64>,
    pub avg_loop: Option<f64>,
}

fn field<V: std::fmt::Display>(out: &mut String, v: Option<V>) {
    out.push(',');
    if let Some(v) = v {
        let _ = write!(out, "{v}");
    }
}

impl MetricsRow {
    pub fn new(step: u64, split: &str) -> Self {
        Self { step, split: split.to_string(), ..Self::default() }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.step, self.split);
        field(&mut s, self.exit);
        field(&mut s, self.loss);
        field(&mut s, self.ppl);
        field(&mut s, self.cycle);
        field(&mut s, self.zero_attn_mean);
        field(&mut s, self.gate_mean);
        field(&mut s, self.lr);
        field(&mut s, self.avg_loop);
        s
    }

    /// Parses a line written by [`MetricsRow::to_csv`].
    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return None;
        }
        fn opt<V: std::str::FromStr>(s: &str) -> Option<Option<V>> {
            if s.is_empty() {
                Some(None)
            } else {
                s.parse().ok().map(Some)
            }
        }
        Some(Self {
            step: f[0].parse().ok()?,
            split: f[1].to_string(),
            exit: opt(f[2])?,
            loss: opt(f[3])?,
            ppl: opt(f[4])?,
            cycle: opt(f[5])?,
            zero_attn_mean: opt(f[6])?,
            gate_mean: opt(f[7])?,
            lr: opt(f[8])?,
            avg_loop: opt(f[9])?,
        })
    }
}

/// Append-only CSV sink. The header is written only into an empty sink.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, write_header: bool) -> io::Result<Self> {
        if write_header {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> io::Result<()> {
        writeln!(self.out, "{}", row.to_csv())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
