//! Earliest-start list scheduling over per-device compute and comm streams.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dag::{OpKind, OpNode, Stream};
use crate::error::{Result, SimError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub device: usize,
    pub stream: Stream,
    pub op: usize,
    pub name: String,
    pub kind: OpKind,
    pub start: u64,
    pub end: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    /// Sorted by device, stream, start, op id.
    pub spans: Vec<Span>,
    pub makespan: u64,
}

/// Repeatedly starts the ready op with the earliest feasible start (all
/// dependencies done and its stream free), breaking ties by op id.
pub fn run_sim(nodes: &[OpNode]) -> Result<Timeline> {
    let n = nodes.len();
    let index: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, o)| (o.id, i)).collect();
    let mut deps = Vec::with_capacity(n);
    for o in nodes {
        let d: Vec<usize> = o
            .deps
            .iter()
            .map(|dep| {
                index
                    .get(dep)
                    .copied()
                    .ok_or(SimError::UnknownDependency { op: o.id, dep: *dep })
            })
            .collect::<Result<_>>()?;
        deps.push(d);
    }
    let mut end: Vec<Option<u64>> = vec![None; n];
    let mut free: BTreeMap<(usize, Stream), u64> = BTreeMap::new();
    let mut spans = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(u64, usize, usize)> = None;
        for i in 0..n {
            if end[i].is_some() {
                continue;
            }
            let mut ready = 0u64;
            let mut ok = true;
            for &j in &deps[i] {
                match end[j] {
                    Some(e) => ready = ready.max(e),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            let o = &nodes[i];
            let start = ready.max(*free.get(&(o.device, o.stream)).unwrap_or(&0));
            if best.map_or(true, |(s, id, _)| (start, o.id) < (s, id)) {
                best = Some((start, o.id, i));
            }
        }
        let Some((start, _, i)) = best else {
            let mut stuck: Vec<usize> = (0..n).filter(|&i| end[i].is_none()).map(|i| nodes[i].id).collect();
            stuck.sort_unstable();
            return Err(SimError::Cycle(stuck));
        };
        let o = &nodes[i];
        let e = start + o.duration;
        end[i] = Some(e);
        free.insert((o.device, o.stream), e);
        spans.push(Span {
            device: o.device,
            stream: o.stream,
            op: o.id,
            name: o.name.clone(),
            kind: o.kind,
            start,
            end: e,
        });
    }
    spans.sort_by_key(|s| (s.device, s.stream, s.start, s.op));
    let makespan = spans.iter().map(|s| s.end).max().unwrap_or(0);
    Ok(Timeline { spans, makespan })
}

impl Timeline {
    pub fn device_spans(&self, device: usize, stream: Stream) -> impl Iterator<Item = &Span> {
        self.spans
            .iter()
            .filter(move |s| s.device == device && s.stream == stream)
    }

    pub fn busy(&self, device: usize, stream: Stream) -> u64 {
        self.device_spans(device, stream).map(|s| s.end - s.start).sum()
    }

    /// Comm time on `device` that coincides with compute on the same device.
    pub fn hidden_comm(&self, device: usize) -> u64 {
        let compute: Vec<&Span> = self.device_spans(device, Stream::Compute).collect();
        self.device_spans(device, Stream::Comm)
            .map(|c| {
                compute
                    .iter()
                    .map(|p| c.end.min(p.end).saturating_sub(c.start.max(p.start)))
                    .sum::<u64>()
            })
            .sum()
    }

    /// Summed span time per op kind on `device`.
    pub fn stage_totals(&self, device: usize) -> BTreeMap<OpKind, u64> {
        let mut out = BTreeMap::new();
        for s in self.spans.iter().filter(|s| s.device == device) {
            *out.entry(s.kind).or_insert(0) += s.end - s.start;
        }
        out
    }

    pub fn span(&self, device: usize, name: &str) -> Option<&Span> {
        self.spans.iter().find(|s| s.device == device && s.name == name)
    }

    /// `device,stream,op,start,end`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("device,stream,op,start,end\n");
        for s in &self.spans {
            let stream = match s.stream {
                Stream::Compute => "compute",
                Stream::Comm => "comm",
            };
            out.push_str(&format!("{},{stream},{},{},{}\n", s.device, s.name, s.start, s.end));
        }
        out
    }
}
