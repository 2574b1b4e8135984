//! Deterministic synchronous-rounds message fabric for the virtual sensors.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{DkfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Fusion,
    DiciMatrix,
    DiciVector,
    Prediction,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Fusion => "fusion",
            Phase::DiciMatrix => "dici_matrix",
            Phase::DiciVector => "dici_vector",
            Phase::Prediction => "prediction",
        }
    }
}

/// A message between sensors. `data` carries `batch` instances of the same
/// payload laid out back to back (independent Monte Carlo trials run in
/// lockstep); traffic is counted per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub src: usize,
    pub dst: usize,
    pub phase: Phase,
    pub tag: u32,
    pub data: Vec<f64>,
    pub batch: usize,
}

impl Message {
    pub fn new(src: usize, dst: usize, phase: Phase, tag: u32, data: Vec<f64>) -> Self {
        Self {
            src,
            dst,
            phase,
            tag,
            data,
            batch: 1,
        }
    }

    pub fn batched(src: usize, dst: usize, phase: Phase, tag: u32, data: Vec<f64>, batch: usize) -> Self {
        Self {
            src,
            dst,
            phase,
            tag,
            data,
            batch: batch.max(1),
        }
    }

    /// Scalars in one instance of the payload.
    pub fn scalars(&self) -> usize {
        self.data.len() / self.batch
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub round: u64,
    pub phase: Phase,
    pub src: usize,
    pub dst: usize,
    pub hops: usize,
    pub scalars: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    /// Transmissions, one per hop (relays included), per payload instance.
    pub messages: u64,
    pub scalars: u64,
}

impl Traffic {
    fn add(&mut self, messages: u64, scalars: u64) {
        self.messages += messages;
        self.scalars += scalars;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficReport {
    pub by_phase: BTreeMap<Phase, Traffic>,
    /// Transmissions made by each sensor, relays included.
    pub by_sensor: Vec<Traffic>,
    pub total: Traffic,
    pub rounds: u64,
    pub max_payload: usize,
}

/// Sensors, the undirected communication graph, shortest-path routes and the
/// traffic counters.
#[derive(Debug, Clone)]
pub struct CommNetwork {
    adj: Vec<Vec<usize>>,
    dist: Vec<Vec<Option<usize>>>,
    next_hop: Vec<Vec<Option<usize>>>,
    inboxes: Vec<Vec<Message>>,
    round: u64,
    log: Vec<LogEntry>,
    keep_log: bool,
    payload_limit: Option<usize>,
    report: TrafficReport,
}

impl CommNetwork {
    pub fn new(adj: Vec<Vec<usize>>) -> Self {
        let n = adj.len();
        let mut adj = adj;
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        let dist: Vec<Vec<Option<usize>>> = (0..n).map(|s| bfs(&adj, s)).collect();
        // Next hop from s toward d: lowest-id neighbour one step closer to d.
        let next_hop = (0..n)
            .map(|s| {
                (0..n)
                    .map(|d| {
                        let ds = dist[s][d]?;
                        if ds == 0 {
                            return Some(s);
                        }
                        adj[s].iter().copied().find(|&v| dist[v][d] == Some(ds - 1))
                    })
                    .collect()
            })
            .collect();
        Self {
            inboxes: vec![Vec::new(); n],
            report: TrafficReport {
                by_sensor: vec![Traffic::default(); n],
                ..Default::default()
            },
            adj,
            dist,
            next_hop,
            round: 0,
            log: Vec::new(),
            keep_log: false,
            payload_limit: None,
        }
    }

    pub fn num_sensors(&self) -> usize {
        self.adj.len()
    }
    pub fn neighbours(&self, s: usize) -> &[usize] {
        &self.adj[s]
    }
    pub fn round(&self) -> u64 {
        self.round
    }
    pub fn hops(&self, src: usize, dst: usize) -> Option<usize> {
        self.dist[src][dst]
    }

    /// Sensors on the route from `src` to `dst`, both ends included.
    pub fn route(&self, src: usize, dst: usize) -> Result<Vec<usize>> {
        self.dist[src][dst].ok_or(DkfError::NoRoute { src, dst })?;
        let mut path = vec![src];
        let mut at = src;
        while at != dst {
            at = self.next_hop[at][dst].ok_or(DkfError::NoRoute { src, dst })?;
            path.push(at);
        }
        Ok(path)
    }

    pub fn set_logging(&mut self, on: bool) {
        self.keep_log = on;
    }
    pub fn set_payload_limit(&mut self, limit: Option<usize>) {
        self.payload_limit = limit;
    }
    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// One synchronous round: each sensor's closure sees the messages
    /// delivered at the previous barrier and returns its outbox; outboxes are
    /// routed and become next round's inboxes.
    pub fn run_round<S, F>(&mut self, states: &mut [S], compute: F) -> Result<()>
    where
        S: Send,
        F: Fn(usize, &mut S, Vec<Message>) -> Result<Vec<Message>> + Sync,
    {
        assert_eq!(states.len(), self.num_sensors());
        let inboxes = std::mem::replace(&mut self.inboxes, vec![Vec::new(); states.len()]);
        let outboxes: Vec<Result<Vec<Message>>> = states
            .par_iter_mut()
            .zip(inboxes.into_par_iter())
            .enumerate()
            .map(|(id, (st, inbox))| compute(id, st, inbox))
            .collect();
        for (id, out) in outboxes.into_iter().enumerate() {
            for msg in out? {
                self.send(id, msg)?;
            }
        }
        self.round += 1;
        self.report.rounds = self.round;
        Ok(())
    }

    fn send(&mut self, id: usize, msg: Message) -> Result<()> {
        assert_eq!(msg.src, id, "sensor {id} forged a message from {}", msg.src);
        let scalars = msg.scalars();
        if let Some(limit) = self.payload_limit {
            if scalars > limit {
                return Err(DkfError::PayloadLimit { scalars, limit });
            }
        }
        let path = self.route(msg.src, msg.dst)?;
        let hops = path.len() - 1;
        let batch = msg.batch as u64;
        for &relay in &path[..hops] {
            self.report.by_sensor[relay].add(batch, batch * scalars as u64);
        }
        self.report
            .by_phase
            .entry(msg.phase)
            .or_default()
            .add(batch * hops as u64, batch * (hops * scalars) as u64);
        self.report.total.add(batch * hops as u64, batch * (hops * scalars) as u64);
        self.report.max_payload = self.report.max_payload.max(scalars);
        if self.keep_log {
            self.log.push(LogEntry {
                round: self.round,
                phase: msg.phase,
                src: msg.src,
                dst: msg.dst,
                hops,
                scalars,
            });
        }
        let dst = msg.dst;
        self.inboxes[dst].push(msg);
        Ok(())
    }

    /// True when no message awaits delivery.
    pub fn is_flushed(&self) -> bool {
        self.inboxes.iter().all(Vec::is_empty)
    }

    pub fn traffic_report(&self) -> TrafficReport {
        self.report.clone()
    }

    pub fn reset_counters(&mut self) {
        self.report = TrafficReport {
            by_sensor: vec![Traffic::default(); self.num_sensors()],
            ..Default::default()
        };
        self.log.clear();
    }

    /// Message log as CSV `round,phase,src,dst,hops,scalars`.
    pub fn log_csv(&self) -> String {
        let mut s = String::from("round,phase,src,dst,hops,scalars\n");
        for e in &self.log {
            let _ = writeln!(s, "{},{},{},{},{},{}", e.round, e.phase.name(), e.src, e.dst, e.hops, e.scalars);
        }
        s
    }
}

fn bfs(adj: &[Vec<usize>], s: usize) -> Vec<Option<usize>> {
    let mut d = vec![None; adj.len()];
    d[s] = Some(0);
    let mut q = VecDeque::from([s]);
    while let Some(v) = q.pop_front() {
        for &w in &adj[v] {
            if d[w].is_none() {
                d[w] = Some(d[v].unwrap() + 1);
                q.push_back(w);
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize) -> Vec<Vec<usize>> {
        (0..n)
            .map(|i| {
                let mut v = Vec::new();
                if i > 0 {
                    v.push(i - 1);
                }
                if i + 1 < n {
                    v.push(i + 1);
                }
                v
            })
            .collect()
    }

    #[test]
    fn empty_round_changes_nothing() {
        let mut net = CommNetwork::new(chain(3));
        let mut st = vec![0u8; 3];
        net.run_round(&mut st, |_, _, _| Ok(Vec::new())).unwrap();
        assert_eq!(net.traffic_report().total, Traffic::default());
    }

    #[test]
    fn multi_hop_logged() {
        let mut net = CommNetwork::new(chain(4));
        net.set_logging(true);
        let mut st = vec![(); 4];
        net.run_round(&mut st, |id, _, _| {
            Ok(if id == 0 {
                vec![Message::new(0, 3, Phase::Fusion, 0, vec![1.0, 2.0])]
            } else {
                vec![]
            })
        })
        .unwrap();
        assert_eq!(net.log()[0].hops, 3);
        let rep = net.traffic_report();
        assert_eq!(rep.total.messages, 3);
        assert_eq!(rep.by_sensor[1].messages, 1);
        assert_eq!(rep.by_sensor[3].messages, 0);
        let mut got = Vec::new();
        let mut st = vec![0usize; 4];
        net.run_round(&mut st, |_, s, inbox| {
            *s = inbox.len();
            Ok(vec![])
        })
        .unwrap();
        got.extend(st);
        assert_eq!(got, vec![0, 0, 0, 1]);
    }

    #[test]
    fn ties_use_lowest_next_hop() {
        // Square 0-1-3, 0-2-3.
        let adj = vec![vec![1, 2], vec![0, 3], vec![0, 3], vec![1, 2]];
        let net = CommNetwork::new(adj);
        assert_eq!(net.route(0, 3).unwrap(), vec![0, 1, 3]);
    }

    #[test]
    fn unroutable_and_oversized() {
        let mut net = CommNetwork::new(vec![vec![], vec![]]);
        let mut st = vec![(); 2];
        let err = net
            .run_round(&mut st, |id, _, _| {
                Ok(if id == 0 { vec![Message::new(0, 1, Phase::Fusion, 0, vec![])] } else { vec![] })
            })
            .unwrap_err();
        assert!(matches!(err, DkfError::NoRoute { .. }));
        let mut net = CommNetwork::new(chain(2));
        net.set_payload_limit(Some(1));
        let err = net
            .run_round(&mut st, |id, _, _| {
                Ok(if id == 0 { vec![Message::new(0, 1, Phase::Fusion, 0, vec![1.0, 2.0])] } else { vec![] })
            })
            .unwrap_err();
        assert!(matches!(err, DkfError::PayloadLimit { .. }));
    }

    #[test]
    fn single_sensor_is_silent() {
        let net = CommNetwork::new(vec![vec![]]);
        assert_eq!(net.traffic_report().total.messages, 0);
    }
}
