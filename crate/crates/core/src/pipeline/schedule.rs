//! Interval schedule: the ordered events of a progressive run.

use std::fmt;

use crate::error::{Error, Result};

/// One scheduled action. Step events name the timestep they leave, so
/// `Guided(t)` and `Free(t)` move the latents from `t` to `t − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    Guided(usize),
    Free(usize),
    Store(usize),
    Extract(usize),
    /// 1-based index of the field being trained.
    Train(usize),
    Rewind(usize),
    Finish(usize),
}

impl Event {
    pub fn is_step(&self) -> bool {
        matches!(self, Event::Guided(_) | Event::Free(_))
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Guided(t) => write!(f, "guided {t}"),
            Event::Free(t) => write!(f, "free {t}"),
            Event::Store(t) => write!(f, "store {t}"),
            Event::Extract(t) => write!(f, "extract {t}"),
            Event::Train(k) => write!(f, "train {k}"),
            Event::Rewind(t) => write!(f, "rewind {t}"),
            Event::Finish(t) => write!(f, "finish {t}"),
        }
    }
}

impl std::str::FromStr for Event {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, n) = s
            .trim()
            .split_once(' ')
            .ok_or_else(|| Error::format(format!("bad event line {s:?}")))?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::format(format!("bad event argument in {s:?}")))?;
        Ok(match name {
            "guided" => Event::Guided(n),
            "free" => Event::Free(n),
            "store" => Event::Store(n),
            "extract" => Event::Extract(n),
            "train" => Event::Train(n),
            "rewind" => Event::Rewind(n),
            "finish" => Event::Finish(n),
            _ => return Err(Error::format(format!("unknown event {name:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntervalSchedule {
    pub steps: usize,
    pub tau: usize,
    /// Events grouped by interval; the first group is the unguided warm-up.
    pub intervals: Vec<Vec<Event>>,
}

impl IntervalSchedule {
    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.intervals.iter().flatten()
    }

    /// Timesteps at which queries are extracted, in order.
    pub fn extraction_timesteps(&self) -> Vec<usize> {
        self.events()
            .filter_map(|e| match e {
                Event::Extract(t) => Some(*t),
                _ => None,
            })
            .collect()
    }

    pub fn training_count(&self) -> usize {
        self.events().filter(|e| matches!(e, Event::Train(_))).count()
    }

    pub fn lines(&self) -> String {
        self.events().map(|e| format!("{e}\n")).collect()
    }
}

/// Builds the event list for `steps` denoising steps and half-interval `tau`.
///
/// The first interval denoises freely for 2τ steps. Every later interval
/// starting at `T_i` takes τ guided steps, stores the latents, takes τ free
/// steps, extracts, trains and rewinds to the stored latents. When fewer
/// than 2τ steps remain the interval instead runs guided to 0 and finishes.
pub fn build_schedule(steps: usize, tau: usize) -> Result<IntervalSchedule> {
    if tau < 1 {
        return Err(Error::domain("tau must be at least 1"));
    }
    if 2 * tau > steps {
        return Err(Error::domain(format!("2τ ≤ T violated (tau={tau}, T={steps})")));
    }
    let mut intervals = Vec::new();
    let mut first = Vec::new();
    for t in (steps - 2 * tau + 1..=steps).rev() {
        first.push(Event::Free(t));
        if t - 1 == steps - tau {
            first.push(Event::Store(t - 1));
        }
    }
    first.push(Event::Extract(steps - 2 * tau));
    first.push(Event::Train(1));
    first.push(Event::Rewind(steps - tau));
    intervals.push(first);

    let mut start = steps - tau;
    let mut trained = 1;
    loop {
        let mut seg = Vec::new();
        if start >= 2 * tau {
            let mid = start - tau;
            seg.extend((mid + 1..=start).rev().map(Event::Guided));
            seg.push(Event::Store(mid));
            seg.extend((mid - tau + 1..=mid).rev().map(Event::Free));
            trained += 1;
            seg.push(Event::Extract(mid - tau));
            seg.push(Event::Train(trained));
            seg.push(Event::Rewind(mid));
            intervals.push(seg);
            start = mid;
        } else {
            seg.extend((1..=start).rev().map(Event::Guided));
            seg.push(Event::Finish(0));
            intervals.push(seg);
            break;
        }
    }
    Ok(IntervalSchedule { steps, tau, intervals })
}

/// Timesteps of the denoising steps that survive every rewind, in execution
/// order. A complete run yields `T, T−1, …, 1`.
pub fn final_steps<'a>(events: impl IntoIterator<Item = &'a Event>) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for e in events {
        match *e {
            Event::Guided(t) | Event::Free(t) => kept.push(t),
            // steps taken after reaching `t` leave timesteps ≤ t
            Event::Rewind(t) => kept.retain(|&s| s > t),
            _ => {}
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_two_matches_hand_trace() {
        let s = build_schedule(10, 2).unwrap();
        let want = "\
free 10\nfree 9\nstore 8\nfree 8\nfree 7\nextract 6\ntrain 1\nrewind 8\n\
guided 8\nguided 7\nstore 6\nfree 6\nfree 5\nextract 4\ntrain 2\nrewind 6\n\
guided 6\nguided 5\nstore 4\nfree 4\nfree 3\nextract 2\ntrain 3\nrewind 4\n\
guided 4\nguided 3\nstore 2\nfree 2\nfree 1\nextract 0\ntrain 4\nrewind 2\n\
guided 2\nguided 1\nfinish 0\n";
        assert_eq!(s.lines(), want);
        assert_eq!(s.extraction_timesteps(), vec![6, 4, 2, 0]);
        assert_eq!(s.intervals.len(), 5);
    }

    #[test]
    fn fifty_five_has_nine_trainings() {
        let s = build_schedule(50, 5).unwrap();
        assert_eq!(s.training_count(), 9);
        assert_eq!(s.extraction_timesteps(), (0..=40).rev().step_by(5).collect::<Vec<_>>());
    }

    #[test]
    fn preconditions() {
        assert!(matches!(build_schedule(5, 3), Err(Error::Domain(_))));
        assert!(matches!(build_schedule(5, 0), Err(Error::Domain(_))));
        assert!(build_schedule(4, 2).is_ok());
    }

    #[test]
    fn uneven_split_still_reaches_zero() {
        let s = build_schedule(11, 2).unwrap();
        assert_eq!(final_steps(s.events()), (1..=11).rev().collect::<Vec<_>>());
        assert_eq!(s.events().last(), Some(&Event::Finish(0)));
    }

    #[test]
    fn event_lines_parse_back() {
        let s = build_schedule(12, 3).unwrap();
        let parsed: Vec<Event> = s.lines().lines().map(|l| l.parse().unwrap()).collect();
        assert_eq!(parsed, s.events().copied().collect::<Vec<_>>());
        assert!("jump 3".parse::<Event>().is_err());
    }
}
