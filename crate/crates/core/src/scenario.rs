//! Line-oriented scenario files.
//!
//! ```text
//! # three replicas, one spare
//! group p1,p2,p3,p4
//! cohort p1,p2,p3
//! ticks 600
//! seeds 0..100
//! policy manual                      # or: replace-suspected | scale 4
//! at 5 submit c1 hello
//! at 6 submit-via p2 c1 world        # hand the command to a specific replica
//! every 3 from 10 to 100 submit c2 load
//! every 3 from 10 to 100 submit-via p1 c2 load
//! at 50 recon p1,p2,p4
//! at 50 recon-via p2 p2,p3,p4
//! at 70 crash p3
//! at 80 recover p3
//! at 90 partition p1,p4 | p2,p3
//! at 120 heal
//! at 130 drop p1 p2                  # cut one link (both directions)
//! at 140 loss 0.02                   # drop probability for every message
//! at 150 delay p1 p2 50 40 branch 0  # +50 ticks on p1->p2 for 40 ticks
//! ```
//!
//! `every` expands to one submit per period with payloads `<prefix>-<n>`.
//! `heal` clears partitions, cut links and delays; loss stays until reset.

use std::collections::BTreeSet;
use std::ops::Range;

use thiserror::Error;

use crate::config::PolicyKind;
use crate::types::{Configuration, ProcessId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("scenario line {line}: {reason}")]
pub struct ScenarioError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioEvent {
    Submit {
        client: ProcessId,
        payload: String,
        via: Option<ProcessId>,
    },
    Recon {
        config: Configuration,
        via: Option<ProcessId>,
    },
    Crash(ProcessId),
    Recover(ProcessId),
    Partition(Vec<BTreeSet<ProcessId>>),
    Heal,
    Drop(ProcessId, ProcessId),
    Loss(f64),
    Delay {
        from: ProcessId,
        to: ProcessId,
        extra: u64,
        duration: u64,
        /// Only messages about branches rooted at this slot.
        branch_slot: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub group: BTreeSet<ProcessId>,
    pub cohort: Configuration,
    pub ticks: u64,
    pub seeds: Range<u64>,
    pub policy: PolicyKind,
    /// Sorted by tick; events at the same tick keep file order.
    pub events: Vec<(u64, ScenarioEvent)>,
}

pub const DEFAULT_TICKS: u64 = 2000;

fn pid(tok: &str) -> Result<ProcessId, String> {
    tok.parse().map_err(|_| format!("bad process id {tok:?}"))
}

fn num<T: std::str::FromStr>(tok: &str, what: &str) -> Result<T, String> {
    tok.parse().map_err(|_| format!("bad {what} {tok:?}"))
}

fn payload(tok: &str) -> Result<String, String> {
    if tok.contains(['=', '\t']) {
        return Err(format!("payload {tok:?} may not contain '=' or tabs"));
    }
    Ok(tok.to_string())
}

fn config(tok: &str) -> Result<Configuration, String> {
    tok.parse().map_err(|_| format!("bad configuration {tok:?}"))
}

fn seeds(tok: &str) -> Result<Range<u64>, String> {
    match tok.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (num(a, "seed")?, num(b, "seed")?);
            if a >= b {
                return Err(format!("empty seed range {tok:?}"));
            }
            Ok(a..b)
        }
        None => {
            let s: u64 = num(tok, "seed")?;
            Ok(s..s + 1)
        }
    }
}

fn parse_event(words: &[&str]) -> Result<ScenarioEvent, String> {
    let ev = match words {
        ["submit", c, p] => ScenarioEvent::Submit {
            client: pid(c)?,
            payload: payload(p)?,
            via: None,
        },
        ["submit-via", r, c, p] => ScenarioEvent::Submit {
            client: pid(c)?,
            payload: payload(p)?,
            via: Some(pid(r)?),
        },
        ["recon", m] => ScenarioEvent::Recon {
            config: config(m)?,
            via: None,
        },
        ["recon-via", r, m] => ScenarioEvent::Recon {
            config: config(m)?,
            via: Some(pid(r)?),
        },
        ["crash", p] => ScenarioEvent::Crash(pid(p)?),
        ["recover", p] => ScenarioEvent::Recover(pid(p)?),
        ["partition", rest @ ..] if !rest.is_empty() => {
            let joined = rest.join(" ");
            let sides = joined
                .split('|')
                .map(|side| {
                    side.trim()
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| pid(s.trim()))
                        .collect::<Result<BTreeSet<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()?;
            if sides.len() < 2 || sides.iter().any(|s| s.is_empty()) {
                return Err("partition needs at least two non-empty sides".into());
            }
            ScenarioEvent::Partition(sides)
        }
        ["heal"] => ScenarioEvent::Heal,
        ["drop", a, b] => ScenarioEvent::Drop(pid(a)?, pid(b)?),
        ["loss", p] => {
            let p: f64 = num(p, "probability")?;
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("loss probability {p} outside [0,1]"));
            }
            ScenarioEvent::Loss(p)
        }
        ["delay", f, t, extra, dur] => ScenarioEvent::Delay {
            from: pid(f)?,
            to: pid(t)?,
            extra: num(extra, "delay")?,
            duration: num(dur, "duration")?,
            branch_slot: None,
        },
        ["delay", f, t, extra, dur, "branch", slot] => ScenarioEvent::Delay {
            from: pid(f)?,
            to: pid(t)?,
            extra: num(extra, "delay")?,
            duration: num(dur, "duration")?,
            branch_slot: Some(num(slot, "branch slot")?),
        },
        _ => return Err(format!("unknown event {:?}", words.join(" "))),
    };
    Ok(ev)
}

fn mentioned(ev: &ScenarioEvent) -> Vec<ProcessId> {
    match ev {
        ScenarioEvent::Submit { via, .. } => via.iter().copied().collect(),
        ScenarioEvent::Recon { config, via } => {
            config.members().chain(via.iter().copied()).collect()
        }
        ScenarioEvent::Crash(p) | ScenarioEvent::Recover(p) => vec![*p],
        ScenarioEvent::Partition(sides) => sides.iter().flatten().copied().collect(),
        ScenarioEvent::Drop(a, b) => vec![*a, *b],
        ScenarioEvent::Delay { from, to, .. } => vec![*from, *to],
        ScenarioEvent::Heal | ScenarioEvent::Loss(_) => Vec::new(),
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut group: Option<BTreeSet<ProcessId>> = None;
    let mut cohort: Option<Configuration> = None;
    let mut ticks = DEFAULT_TICKS;
    let mut seed_range = 0..1;
    let mut policy = PolicyKind::Manual;
    let mut events: Vec<(u64, usize, ScenarioEvent)> = Vec::new();
    let mut last_at = 0;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |reason: String| ScenarioError { line, reason };
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let words: Vec<&str> = body.split_whitespace().collect();
        match words.as_slice() {
            ["group", m] => {
                let c = config(m).map_err(err)?;
                group = Some(c.member_set().clone());
            }
            ["cohort", m] => cohort = Some(config(m).map_err(err)?),
            ["ticks", n] => ticks = num(n, "tick count").map_err(err)?,
            ["seeds", r] | ["seed", r] => seed_range = seeds(r).map_err(err)?,
            ["policy", rest @ ..] => {
                policy = rest.join(" ").parse().map_err(err)?;
            }
            ["at", t, rest @ ..] => {
                let t: u64 = num(t, "tick").map_err(err)?;
                if t < last_at {
                    return Err(err(format!("tick {t} after tick {last_at}")));
                }
                last_at = t;
                events.push((t, line, parse_event(rest).map_err(err)?));
            }
            ["every", k, "from", a, "to", b, rest @ ..] => {
                let (via, c, prefix) = match rest {
                    ["submit", c, prefix] => (None, c, prefix),
                    ["submit-via", r, c, prefix] => (Some(pid(r).map_err(err)?), c, prefix),
                    _ => return Err(err(format!("unknown directive {body:?}"))),
                };
                let k: u64 = num(k, "period").map_err(err)?;
                let a: u64 = num(a, "tick").map_err(err)?;
                let b: u64 = num(b, "tick").map_err(err)?;
                if k == 0 || a > b {
                    return Err(err("every needs a positive period and from <= to".into()));
                }
                let client = pid(c).map_err(err)?;
                let prefix = payload(prefix).map_err(err)?;
                for (n, t) in (a..=b).step_by(k as usize).enumerate() {
                    events.push((
                        t,
                        line,
                        ScenarioEvent::Submit {
                            client,
                            payload: format!("{prefix}-{n}"),
                            via,
                        },
                    ));
                }
            }
            _ => return Err(err(format!("unknown directive {body:?}"))),
        }
    }

    let cohort = cohort.ok_or(ScenarioError {
        line: 0,
        reason: "missing cohort".into(),
    })?;
    let group = group.unwrap_or_else(|| cohort.member_set().clone());
    if !cohort.is_subset(&group) {
        return Err(ScenarioError {
            line: 0,
            reason: format!("cohort {cohort} is not within the group"),
        });
    }
    for (_, line, ev) in &events {
        if let Some(p) = mentioned(ev).into_iter().find(|p| !group.contains(p)) {
            return Err(ScenarioError {
                line: *line,
                reason: format!("{p} is not a group member"),
            });
        }
    }
    // stable: same-tick events keep file order
    events.sort_by_key(|(t, line, _)| (*t, *line));
    Ok(Scenario {
        group,
        cohort,
        ticks,
        seeds: seed_range,
        policy,
        events: events.into_iter().map(|(t, _, e)| (t, e)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_directive() {
        let s = parse_scenario(
            "group p1,p2,p3,p4\ncohort p1,p2,p3\nticks 300\nseeds 5..8\npolicy scale 4\n\
             at 1 submit c1 a\nevery 10 from 0 to 20 submit c2 load\nat 2 submit-via p2 c1 b\n\
             at 3 recon p1,p2,p4\nat 4 recon-via p2 p2,p3\nat 5 crash p3\nat 6 recover p3\n\
             at 7 partition p1,p4 | p2,p3\nat 8 heal\nat 9 drop p1 p2\nat 10 loss 0.5\n\
             at 11 delay p1 p2 50 40 branch 0\nat 12 delay p1 p3 5 5\n",
        )
        .unwrap();
        assert_eq!(s.group.len(), 4);
        assert_eq!(s.ticks, 300);
        assert_eq!(s.seeds, 5..8);
        assert_eq!(s.policy, PolicyKind::ScaleTo(4));
        let ticks: Vec<u64> = s.events.iter().map(|(t, _)| *t).collect();
        let mut sorted = ticks.clone();
        sorted.sort();
        assert_eq!(ticks, sorted);
        // same tick keeps file order: the every line precedes "at 10 loss"
        let at10: Vec<&ScenarioEvent> =
            s.events.iter().filter(|(t, _)| *t == 10).map(|(_, e)| e).collect();
        assert!(matches!(at10[0], ScenarioEvent::Submit { .. }));
        assert!(matches!(at10[1], ScenarioEvent::Loss(_)));
        assert_eq!(s.events.len(), 3 + 12);
    }

    #[test]
    fn rejects_bad_input() {
        let bad = [
            "group p1,p2\nat 1 submit c1 x",
            "cohort p1,p2\nat 5 heal\nat 4 heal",
            "cohort p1,p2\nat 1 crash p9",
            "cohort p1,p2\nat 1 loss 2",
            "cohort p1,p2\nat 1 frobnicate",
            "cohort p1,p2\nat 1 submit c1 a=b",
            "group p1\ncohort p1,p2",
            "cohort p1\nat 1 partition p1",
        ];
        for text in bad {
            assert!(parse_scenario(text).is_err(), "{text}");
        }
    }
}
