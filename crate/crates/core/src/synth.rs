//! Seeded synthetic corpora with known ground truth.
//!
//! All randomness comes from ChaCha8 streams derived from the spec seed
//! (see [`crate::rng`]), so output is identical across platforms.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::CHARACTERISTIC_NAMES;
use crate::error::{Error, Result};
use crate::ingest::RawRecord;
use crate::rng;
use crate::time::{self, Timestamp, DAY, HOUR, MINUTE, WEEK};
use crate::trajectory::{burstiness, OperationClass, ReferencePattern, ReferenceSet};

pub const ACTIVITY_TYPES: usize = 5;
const SUBSYSTEM_NAMES: [&str; 20] = [
    "core", "usb", "net", "mm", "fs", "sched", "drm", "block", "sound", "input", "crypto", "pci", "scsi", "media", "power", "staging", "arm",
    "x86", "rdma", "iio",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantSpec {
    pub sender_id: String,
    /// Index of the planted sender's subsystem.
    pub subsystem: usize,
    /// Ground-truth activity type of every planted event.
    pub activity: usize,
    /// Senders whose events the planted sender approaches; empty means all maintainers.
    pub reference_senders: Vec<String>,
    /// Fraction of planted events near the references grows as `rate·t/T`.
    pub approach_rate: f64,
    pub base_events: usize,
    /// Event multiplier on burst slices.
    pub burst_factor: f64,
    /// Every `burst_every`-th slice is a burst slice; 0 disables bursts.
    pub burst_every: usize,
    #[serde(with = "time::duration_serde")]
    pub window: i64,
    /// Recede instead of approach.
    pub reverse: bool,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            sender_id: "plant-0".into(),
            subsystem: 1,
            activity: 1,
            reference_senders: vec![],
            approach_rate: 1.0,
            base_events: 80,
            burst_factor: 3.0,
            burst_every: 3,
            window: 2 * HOUR,
            reverse: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    /// Expected background events in the stream; also the row count of
    /// generated factor data.
    pub n_events: usize,
    pub n_senders: usize,
    pub n_maintainers: usize,
    pub n_subsystems: usize,
    pub slices: usize,
    #[serde(with = "time::duration_serde")]
    pub slice_len: i64,
    #[serde(deserialize_with = "time::deserialize_timestamp", serialize_with = "time::serialize_timestamp")]
    pub start: Timestamp,
    /// Subsystem bursts per day; senders post only inside their subsystem's bursts.
    pub bursts_per_day: f64,
    /// Burst length; `None` keeps every subsystem active all the time.
    #[serde(with = "optional_duration")]
    pub burst_len: Option<i64>,
    /// Weight of a maintainer's posting rate relative to a regular sender.
    pub maintainer_weight: f64,
    /// Probability that a regular sender's event has its dominant type.
    pub purity: f64,
    pub maintainer_purity: f64,
    pub bot_events: usize,
    /// p×m loadings for factor data; empty selects the built-in 14×5 structure.
    pub true_loadings: Vec<Vec<f64>>,
    pub noise_scale: f64,
    pub plant: Option<PlantSpec>,
}

mod optional_duration {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<i64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_i64(*x),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<i64>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "crate::time::duration_serde")] i64);
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_events: 36_000,
            n_senders: 60,
            n_maintainers: 4,
            n_subsystems: 16,
            slices: 12,
            slice_len: WEEK,
            start: 2700 * WEEK,
            bursts_per_day: 2.0,
            burst_len: Some(HOUR),
            maintainer_weight: 4.0,
            purity: 0.75,
            maintainer_purity: 0.95,
            bot_events: 100,
            true_loadings: vec![],
            noise_scale: 1.0,
            plant: Some(PlantSpec::default()),
        }
    }
}

/// Built-in 14×5 structure: each characteristic has one primary factor,
/// the last also loads on factor 3, so every factor has three indicators.
pub fn default_loadings() -> Vec<Vec<f64>> {
    let primary = [0, 4, 0, 2, 0, 4, 2, 1, 1, 1, 3, 2, 3, 4];
    let strength = [0.75, 0.7, 0.65, 0.8, 0.6, 0.7, 0.75, 0.85, 0.8, 0.6, 0.55, 0.7, 0.65, 0.7];
    let mut rows: Vec<Vec<f64>> = (0..CHARACTERISTIC_NAMES.len())
        .map(|j| {
            let mut row = vec![0.05; 5];
            row[primary[j]] = strength[j];
            row
        })
        .collect();
    rows[13][3] = 0.5;
    rows
}

impl SynthSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("n_events", self.n_events),
            ("n_senders", self.n_senders),
            ("n_subsystems", self.n_subsystems),
            ("slices", self.slices),
        ] {
            if v < 1 {
                errs.push(format!("{name} must be at least 1"));
            }
        }
        if self.n_maintainers > self.n_senders {
            errs.push("n_maintainers cannot exceed n_senders".into());
        }
        if self.slice_len <= 0 {
            errs.push("slice_len must be positive".into());
        }
        if self.burst_len.is_some_and(|l| l <= 0) || !(self.bursts_per_day > 0.0) {
            errs.push("bursts need a positive length and rate".into());
        }
        if !(0.0..=1.0).contains(&self.purity) || !(0.0..=1.0).contains(&self.maintainer_purity) {
            errs.push("purities must lie in [0, 1]".into());
        }
        if !(self.noise_scale >= 0.0) {
            errs.push("noise_scale must be non-negative".into());
        }
        if let Some(p) = &self.plant {
            if !(p.approach_rate > 0.0 && p.approach_rate <= 1.0) {
                errs.push(format!("approach_rate must lie in (0, 1], got {}", p.approach_rate));
            }
            if p.base_events < 1 {
                errs.push("plant base_events must be at least 1".into());
            }
            if p.subsystem >= self.n_subsystems || p.activity >= ACTIVITY_TYPES {
                errs.push("plant subsystem or activity out of range".into());
            }
            if self.n_maintainers < 1 && p.reference_senders.is_empty() {
                errs.push("a planted trajectory needs maintainers or explicit reference senders".into());
            }
            if p.burst_factor < 1.0 {
                errs.push("burst_factor must be at least 1".into());
            }
        }
        errs
    }

    fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(errs.join("; ")))
        }
    }

    pub fn end(&self) -> Timestamp {
        self.start + self.slices as i64 * self.slice_len
    }

    pub fn subsystem_name(&self, i: usize) -> String {
        match SUBSYSTEM_NAMES.get(i) {
            Some(n) if self.n_subsystems <= SUBSYSTEM_NAMES.len() => n.to_string(),
            _ => format!("subsystem-{i}"),
        }
    }

    pub fn maintainer_ids(&self) -> Vec<String> {
        (0..self.n_maintainers).map(|i| format!("maint-{i}")).collect()
    }

    /// Maintainers as a reference set, any label and subsystem.
    pub fn reference_set(&self) -> ReferenceSet {
        let senders = match &self.plant {
            Some(p) if !p.reference_senders.is_empty() => p.reference_senders.clone(),
            _ => self.maintainer_ids(),
        };
        ReferenceSet { name: "maintainers".into(), tokens: senders.into_iter().map(ReferencePattern::sender).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorData {
    /// n×p observed characteristics.
    pub x: DMatrix<f64>,
    /// n×m true factor scores.
    pub scores: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
}

/// `X = F·Lᵀ + E` with `F` standard normal and `E_j ~ N(0, 1 − h²_j)·noise_scale`.
pub fn generate_factor_data(spec: &SynthSpec) -> Result<FactorData> {
    let rows = if spec.true_loadings.is_empty() { default_loadings() } else { spec.true_loadings.clone() };
    let m = rows.first().map_or(0, |r| r.len());
    if m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidInput("true_loadings must be a non-empty rectangular matrix".into()));
    }
    let p = rows.len();
    let loadings = DMatrix::from_fn(p, m, |r, c| rows[r][c]);
    let mut uniq = Vec::with_capacity(p);
    for (j, r) in rows.iter().enumerate() {
        let h2: f64 = r.iter().map(|v| v * v).sum();
        if h2 > 1.0 + 1e-12 {
            return Err(Error::InvalidInput(format!("row {j} of true_loadings has communality {h2} > 1")));
        }
        uniq.push((1.0 - h2).max(0.0).sqrt());
    }
    let n = spec.n_events;
    let mut r = rng::stream(spec.seed, 1);
    let scores: DMatrix<f64> = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut r));
    let mut x = &scores * loadings.transpose();
    if spec.noise_scale > 0.0 {
        for i in 0..n {
            for j in 0..p {
                let e: f64 = StandardNormal.sample(&mut r);
                x[(i, j)] += e * uniq[j] * spec.noise_scale;
            }
        }
    }
    Ok(FactorData { x, scores, loadings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventRole {
    Background,
    Maintainer,
    Planted,
    Bot,
}

/// A generated event before rendering; `activity` is the ground-truth type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEvent {
    pub record_id: String,
    pub sender_id: String,
    pub subsystem: usize,
    pub sent_time: Timestamp,
    pub activity: usize,
    pub role: EventRole,
}

/// Sorted, merged `[start, end)` windows during which a subsystem is active.
fn active_windows(spec: &SynthSpec, subsystem: usize) -> Vec<(Timestamp, Timestamp)> {
    let (start, end) = (spec.start, spec.end());
    let Some(len) = spec.burst_len else {
        return vec![(start, end)];
    };
    let mut r = rng::stream(spec.seed, 1000 + subsystem as u64);
    let gap = Exp::new(spec.bursts_per_day / DAY as f64).expect("positive rate");
    let mut begins: Vec<Timestamp> = Vec::new();
    let mut t = start as f64;
    loop {
        t += gap.sample(&mut r);
        if t >= end as f64 {
            break;
        }
        begins.push(t as Timestamp);
    }
    // every subsystem is active at least once per slice
    for i in 0..spec.slices as i64 {
        let (s0, s1) = (start + i * spec.slice_len, start + (i + 1) * spec.slice_len);
        if !begins.iter().any(|&b| b >= s0 && b < s1) {
            begins.push(r.random_range(s0..(s1 - len).max(s0 + 1)));
        }
    }
    begins.sort_unstable();
    let mut out: Vec<(Timestamp, Timestamp)> = Vec::new();
    for b in begins {
        let e = (b + len).min(end);
        match out.last_mut() {
            Some(last) if b <= last.1 => last.1 = last.1.max(e),
            _ => out.push((b, e)),
        }
    }
    out
}

/// Poisson arrivals at `rate` per active second, mapped onto the windows.
fn poisson_in_windows(windows: &[(Timestamp, Timestamp)], rate: f64, r: &mut rng::Rng) -> Vec<Timestamp> {
    let total: i64 = windows.iter().map(|w| w.1 - w.0).sum();
    if rate <= 0.0 || total == 0 {
        return vec![];
    }
    let gap = Exp::new(rate).expect("positive rate");
    let mut out = Vec::new();
    let mut u = 0.0;
    let mut w = 0;
    let mut offset = 0.0;
    loop {
        u += gap.sample(r);
        if u >= total as f64 {
            break;
        }
        while u >= offset + (windows[w].1 - windows[w].0) as f64 {
            offset += (windows[w].1 - windows[w].0) as f64;
            w += 1;
        }
        out.push(windows[w].0 + (u - offset) as Timestamp);
    }
    out
}

struct SenderPlan {
    id: String,
    subsystem: usize,
    weight: f64,
    dominant: usize,
    purity: f64,
    role: EventRole,
}

fn sender_plans(spec: &SynthSpec) -> Vec<SenderPlan> {
    let regular_subsystems = spec.n_subsystems.saturating_sub(1).max(1);
    (0..spec.n_senders)
        .map(|i| {
            if i < spec.n_maintainers {
                SenderPlan { id: format!("maint-{i}"), subsystem: 0, weight: spec.maintainer_weight, dominant: 3 + i % 2, purity: spec.maintainer_purity, role: EventRole::Maintainer }
            } else {
                let k = i - spec.n_maintainers;
                let subsystem = if spec.n_subsystems == 1 { 0 } else { 1 + k % regular_subsystems };
                SenderPlan { id: format!("dev-{k:03}"), subsystem, weight: 1.0, dominant: k % ACTIVITY_TYPES, purity: spec.purity, role: EventRole::Background }
            }
        })
        .collect()
}

/// Mixture: the dominant type with probability `purity`, otherwise uniform.
fn draw_activity(dominant: usize, purity: f64, r: &mut rng::Rng) -> usize {
    if r.random::<f64>() < purity {
        dominant
    } else {
        r.random_range(0..ACTIVITY_TYPES)
    }
}

/// Background, maintainer and bot events sorted by time (ties by record id).
pub fn generate_event_stream(spec: &SynthSpec) -> Result<Vec<SynthEvent>> {
    spec.check()?;
    let windows: Vec<_> = (0..spec.n_subsystems).map(|s| active_windows(spec, s)).collect();
    let plans = sender_plans(spec);
    let total_weight: f64 = plans.iter().map(|p| p.weight).sum();
    let mut events: Vec<SynthEvent> = plans
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, plan)| {
            let mut r = rng::stream(spec.seed, 10_000 + i as u64);
            let w = &windows[plan.subsystem];
            let active: i64 = w.iter().map(|x| x.1 - x.0).sum();
            let expected = spec.n_events as f64 * plan.weight / total_weight;
            let times = poisson_in_windows(w, expected / active.max(1) as f64, &mut r);
            times
                .into_iter()
                .enumerate()
                .map(|(k, t)| SynthEvent {
                    record_id: format!("{}-{k:05}", plan.id),
                    sender_id: plan.id.clone(),
                    subsystem: plan.subsystem,
                    sent_time: t,
                    activity: draw_activity(plan.dominant, plan.purity, &mut r),
                    role: plan.role,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut r = rng::stream(spec.seed, 2);
    let span = spec.end() - spec.start;
    let bot_count = Poisson::new(spec.bot_events.max(1) as f64).map(|d| d.sample(&mut r) as usize).unwrap_or(0);
    for k in 0..if spec.bot_events == 0 { 0 } else { bot_count } {
        events.push(SynthEvent {
            record_id: format!("bot-{k:05}"),
            sender_id: "bot-ci".into(),
            subsystem: r.random_range(0..spec.n_subsystems),
            sent_time: spec.start + r.random_range(0..span),
            activity: 4,
            role: EventRole::Bot,
        });
    }
    sort_events(&mut events);
    Ok(events)
}

fn sort_events(events: &mut [SynthEvent]) {
    events.sort_by(|a, b| a.sent_time.cmp(&b.sent_time).then_with(|| a.record_id.cmp(&b.record_id)));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSlice {
    pub slice: usize,
    pub events: usize,
    /// Events placed within the window of a reference event.
    pub cooccurring: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTrajectory {
    pub sender_id: String,
    pub subsystem: String,
    pub activity: usize,
    pub expected_class: OperationClass,
    pub burstiness: f64,
    pub slices: Vec<PlantedSlice>,
}

/// Per-slice `(events, cooccurring)` schedule of the planted sender.
pub fn plant_schedule(spec: &SynthSpec, plant: &PlantSpec) -> Vec<(usize, usize)> {
    let t_max = spec.slices as f64;
    (1..=spec.slices)
        .map(|t| {
            let burst = plant.burst_every > 0 && t % plant.burst_every == 0;
            let n = (plant.base_events as f64 * if burst { plant.burst_factor } else { 1.0 }).round() as usize;
            let step = if plant.reverse { spec.slices + 1 - t } else { t };
            let frac = (plant.approach_rate * step as f64 / t_max).min(1.0);
            (n, (frac * n as f64).round() as usize)
        })
        .collect()
}

fn near_any(sorted: &[Timestamp], t: Timestamp, window: i64) -> bool {
    let i = sorted.partition_point(|&x| x < t - window);
    sorted.get(i).is_some_and(|&x| x <= t + window)
}

/// Adds the planted sender: per slice, `cooccurring` events land within
/// half a window of a random reference event and the rest near events of
/// the last subsystem, away from every reference event where possible.
pub fn plant_trajectory(stream: Vec<SynthEvent>, spec: &SynthSpec) -> Result<(Vec<SynthEvent>, PlantedTrajectory)> {
    spec.check()?;
    let plant = spec.plant.clone().ok_or_else(|| Error::InvalidInput("spec has no plant section".into()))?;
    let reference = spec.reference_set();
    let ref_times: Vec<Timestamp> = {
        let mut v: Vec<Timestamp> = stream
            .iter()
            .filter(|e| reference.tokens.iter().any(|p| p.sender_id == e.sender_id))
            .map(|e| e.sent_time)
            .collect();
        v.sort_unstable();
        v
    };
    if ref_times.is_empty() {
        return Err(Error::InvalidInput("no reference sender occurs in the stream".into()));
    }
    let distractor_subsystem = spec.n_subsystems - 1;
    let distractor_times: Vec<Timestamp> = stream
        .iter()
        .filter(|e| e.subsystem == distractor_subsystem && e.role == EventRole::Background)
        .map(|e| e.sent_time)
        .collect();
    let schedule = plant_schedule(spec, &plant);
    let mut r = rng::stream(spec.seed, 3);
    let half = plant.window / 2;
    let mut out = stream;
    let mut slices = Vec::new();
    let mut k = 0;
    for (i, &(n, co)) in schedule.iter().enumerate() {
        let (s0, s1) = (spec.start + i as i64 * spec.slice_len, spec.start + (i as i64 + 1) * spec.slice_len);
        let in_slice = |v: &[Timestamp]| -> Vec<Timestamp> { v.iter().copied().filter(|&t| t >= s0 + half && t < s1 - half).collect() };
        let refs = in_slice(&ref_times);
        let distractors = in_slice(&distractor_times);
        if refs.is_empty() && co > 0 {
            return Err(Error::InvalidInput(format!("no reference event in slice {}", i + 1)));
        }
        let mut placed_co = 0;
        for j in 0..n {
            let t = if j < co {
                placed_co += 1;
                refs[r.random_range(0..refs.len())] + r.random_range(-half..=half)
            } else {
                let mut t = s0 + r.random_range(0..spec.slice_len);
                for _ in 0..50 {
                    let anchor = if distractors.is_empty() { s0 + r.random_range(0..spec.slice_len) } else { distractors[r.random_range(0..distractors.len())] };
                    t = (anchor + r.random_range(-half..=half)).clamp(s0, s1 - 1);
                    if !near_any(&ref_times, t, plant.window) {
                        break;
                    }
                }
                t
            };
            out.push(SynthEvent {
                record_id: format!("{}-{k:05}", plant.sender_id),
                sender_id: plant.sender_id.clone(),
                subsystem: plant.subsystem,
                sent_time: t,
                activity: plant.activity,
                role: EventRole::Planted,
            });
            k += 1;
        }
        slices.push(PlantedSlice { slice: i + 1, events: n, cooccurring: placed_co });
    }
    sort_events(&mut out);
    let counts: Vec<usize> = schedule.iter().map(|s| s.0).collect();
    let b = burstiness(&counts);
    let expected_class = if plant.reverse {
        OperationClass::Awry
    } else if b > 1.5 {
        OperationClass::Opportunistic
    } else {
        OperationClass::HitOrMiss
    };
    let descriptor = PlantedTrajectory {
        sender_id: plant.sender_id,
        subsystem: spec.subsystem_name(plant.subsystem),
        activity: plant.activity,
        expected_class,
        burstiness: b,
        slices,
    };
    Ok((out, descriptor))
}

const SHORT_WORDS: [&str; 12] = ["the", "fix", "add", "this", "patch", "code", "path", "lock", "test", "bug", "use", "call"];
const LONG_WORDS: [&str; 8] = [
    "initialization",
    "synchronization",
    "configuration",
    "regression",
    "implementation",
    "documentation",
    "allocation",
    "compatibility",
];

fn sentence(words: usize, long_share: f64, r: &mut rng::Rng) -> String {
    let mut out: Vec<String> = (0..words.max(1))
        .map(|_| {
            if r.random::<f64>() < long_share {
                LONG_WORDS[r.random_range(0..LONG_WORDS.len())].to_string()
            } else {
                SHORT_WORDS[r.random_range(0..SHORT_WORDS.len())].to_string()
            }
        })
        .collect();
    if let Some(first) = out.first_mut() {
        let mut c = first.chars();
        *first = c.next().map(|h| h.to_uppercase().chain(c).collect()).unwrap_or_default();
    }
    format!("{}.", out.join(" "))
}

fn body(sentences: std::ops::RangeInclusive<usize>, words: std::ops::RangeInclusive<usize>, long_share: f64, r: &mut rng::Rng) -> String {
    let n = r.random_range(sentences);
    (0..n).map(|_| sentence(r.random_range(words.clone()), long_share, r)).collect::<Vec<_>>().join(" ")
}

struct Rendered {
    body: String,
    patch: bool,
    bug_fix: bool,
    new_feature: bool,
    revision: bool,
    accepted_patch: bool,
    accepted_commit: bool,
    persuasive: bool,
    latency: f64,
}

fn render(activity: usize, r: &mut rng::Rng) -> Rendered {
    let mut out = Rendered {
        body: String::new(),
        patch: false,
        bug_fix: false,
        new_feature: false,
        revision: false,
        accepted_patch: false,
        accepted_commit: false,
        persuasive: false,
        latency: 0.0,
    };
    match activity {
        0 => {
            out.body = body(5..=9, 10..=16, 0.35, r);
            out.patch = true;
            let kind = r.random::<f64>();
            out.new_feature = kind < 0.45;
            out.bug_fix = (0.45..0.85).contains(&kind);
            out.persuasive = r.random::<f64>() < 0.9;
            out.accepted_patch = r.random::<f64>() < 0.6;
            out.latency = 30.0 * MINUTE as f64;
        }
        1 => {
            out.body = body(3..=6, 20..=30, 0.2, r);
            out.persuasive = r.random::<f64>() < 0.5;
            out.latency = 2.0 * HOUR as f64;
        }
        2 => {
            out.body = body(2..=3, 8..=12, 0.1, r);
            out.patch = true;
            out.revision = true;
            out.bug_fix = r.random::<f64>() < 0.3;
            out.persuasive = r.random::<f64>() < 0.9;
            out.accepted_patch = r.random::<f64>() < 0.3;
            out.latency = 10.0 * MINUTE as f64;
        }
        3 => {
            out.body = body(1..=2, 6..=10, 0.05, r);
            out.accepted_commit = true;
            out.persuasive = r.random::<f64>() < 0.3;
            out.latency = 6.0 * HOUR as f64;
        }
        _ => {
            out.body = body(1..=1, 3..=5, 0.0, r);
            out.persuasive = r.random::<f64>() < 0.1;
            out.latency = 1.0 * HOUR as f64;
        }
    }
    let jitter = Exp::new(1.0).expect("unit rate").sample(r);
    out.latency *= jitter;
    out
}

/// Renders events to raw records. New features and fixes always open a
/// thread; revisions and discussion posts sometimes do. Other revisions
/// follow up the latest earlier patch of their subsystem, and other
/// non-patch events reply to the latest earlier patch there with fewer than
/// three replies (else the latest earlier record). Events without a parent
/// open a thread.
pub fn render_records(events: &[SynthEvent], spec: &SynthSpec) -> Vec<RawRecord> {
    let mut latest_patch: HashMap<usize, Vec<(String, String, usize)>> = HashMap::new();
    let mut latest_any: HashMap<usize, (String, String)> = HashMap::new();
    let mut out = Vec::with_capacity(events.len());
    for e in events {
        let key = e.record_id.bytes().fold(spec.seed, |h, b| rng::derive_seed(h, b as u64));
        let mut r = rng::stream(key, 4);
        let rendered = render(e.activity, &mut r);
        let sub = e.subsystem;
        let opens_thread = match e.activity {
            0 => true,
            2 => r.random::<f64>() < 0.4,
            1 => r.random::<f64>() < 0.3,
            _ => false,
        };
        let (in_reply_to, thread_id) = if opens_thread {
            (None, e.record_id.clone())
        } else if rendered.patch {
            match latest_patch.get(&sub).and_then(|v| v.last()) {
                Some(p) => (Some(p.0.clone()), p.1.clone()),
                None => (None, e.record_id.clone()),
            }
        } else {
            let patches = latest_patch.entry(sub).or_default();
            match patches.iter_mut().rev().find(|p| p.2 < 3) {
                Some(p) => {
                    p.2 += 1;
                    (Some(p.0.clone()), p.1.clone())
                }
                None => match latest_any.get(&sub) {
                    Some((id, thread)) => (Some(id.clone()), thread.clone()),
                    None => (None, e.record_id.clone()),
                },
            }
        };
        if rendered.patch {
            let list = latest_patch.entry(sub).or_default();
            list.push((e.record_id.clone(), thread_id.clone(), 0));
            if list.len() > 32 {
                list.remove(0);
            }
        }
        latest_any.insert(sub, (e.record_id.clone(), thread_id.clone()));
        out.push(RawRecord {
            record_id: e.record_id.clone(),
            sender_id: e.sender_id.clone(),
            subsystem: spec.subsystem_name(sub),
            sent_time: e.sent_time,
            received_time: e.sent_time + rendered.latency.round() as i64,
            thread_id,
            is_first_in_thread: in_reply_to.is_none(),
            in_reply_to,
            body_text: rendered.body,
            is_bot: e.role == EventRole::Bot,
            persuasive: rendered.persuasive,
            is_patch: rendered.patch,
            is_bug_fix: rendered.bug_fix,
            is_new_feature: rendered.new_feature,
            is_revision: rendered.revision,
            accepted_patch: rendered.accepted_patch,
            accepted_commit: rendered.accepted_commit,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTruth {
    pub record_id: String,
    pub activity: usize,
    pub role: EventRole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<RawRecord>,
    pub truth: Vec<EventTruth>,
    pub plant: Option<PlantedTrajectory>,
    pub reference: ReferenceSet,
}

/// Stream, optional plant, and rendering in one call.
pub fn generate_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    let stream = generate_event_stream(spec)?;
    let (events, plant) = if spec.plant.is_some() {
        let (e, p) = plant_trajectory(stream, spec)?;
        (e, Some(p))
    } else {
        (stream, None)
    };
    let records = render_records(&events, spec);
    let truth = events.iter().map(|e| EventTruth { record_id: e.record_id.clone(), activity: e.activity, role: e.role }).collect();
    Ok(SynthCorpus { records, truth, plant, reference: spec.reference_set() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::correlation_matrix;

    #[test]
    fn identity_model_without_noise() {
        let spec = SynthSpec {
            n_events: 50,
            true_loadings: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            noise_scale: 0.0,
            ..SynthSpec::default()
        };
        let d = generate_factor_data(&spec).unwrap();
        assert_eq!(d.x, d.scores);
        let bad = SynthSpec { true_loadings: vec![vec![0.9, 0.9]], ..spec };
        assert!(generate_factor_data(&bad).is_err());
    }

    #[test]
    fn sample_correlation_reproduces_model() {
        let spec = SynthSpec { n_events: 5000, ..SynthSpec::default() };
        let d = generate_factor_data(&spec).unwrap();
        let r = correlation_matrix(&crate::factor::standardize(&d.x).unwrap().z);
        let l = &d.loadings;
        let model = l * l.transpose();
        for i in 0..l.nrows() {
            for j in 0..l.nrows() {
                let expected = if i == j { 1.0 } else { model[(i, j)] };
                assert!((r[(i, j)] - expected).abs() < 0.05, "({i},{j}) {} vs {expected}", r[(i, j)]);
            }
        }
        assert_eq!(generate_factor_data(&spec).unwrap(), d);
    }

    #[test]
    fn poisson_interarrival_mean() {
        let spec = SynthSpec {
            n_events: 10_000,
            n_senders: 1,
            n_maintainers: 0,
            n_subsystems: 1,
            burst_len: None,
            bot_events: 0,
            slices: 10,
            plant: None,
            ..SynthSpec::default()
        };
        let events = generate_event_stream(&spec).unwrap();
        let lambda = spec.n_events as f64 / (spec.end() - spec.start) as f64;
        let gaps: Vec<f64> = events.windows(2).map(|w| (w[1].sent_time - w[0].sent_time) as f64).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!(gaps.len() > 9000);
        assert!((mean * lambda - 1.0).abs() < 0.05, "{mean} vs {}", 1.0 / lambda);
    }

    #[test]
    fn stream_is_deterministic_and_sorted() {
        let spec = SynthSpec { n_events: 2000, ..SynthSpec::default() };
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a.records, b.records);
        assert!(a.records.windows(2).all(|w| w[0].sent_time <= w[1].sent_time));
        assert!(a.records.iter().all(|r| r.validate().is_ok()));
        assert!(a.records.iter().all(|r| r.sent_time >= spec.start && r.sent_time < spec.end()));
    }

    #[test]
    fn separated_bursts_never_share_a_window() {
        let spec = SynthSpec { n_events: 3000, n_subsystems: 3, burst_len: Some(HOUR), bursts_per_day: 0.5, plant: None, bot_events: 0, ..SynthSpec::default() };
        let w1 = active_windows(&spec, 1);
        let w2 = active_windows(&spec, 2);
        let window = 2 * HOUR;
        let far = |t: Timestamp, other: &[(Timestamp, Timestamp)]| other.iter().all(|&(a, b)| t < a - window || t >= b + window);
        let events = generate_event_stream(&spec).unwrap();
        let a: Vec<Timestamp> = events.iter().filter(|e| e.subsystem == 1 && far(e.sent_time, &w2)).map(|e| e.sent_time).collect();
        let b: Vec<Timestamp> = events.iter().filter(|e| e.subsystem == 2 && far(e.sent_time, &w1)).map(|e| e.sent_time).collect();
        assert!(!a.is_empty() && !b.is_empty());
        for &x in &a {
            assert!(b.iter().all(|&y| (x - y).abs() > window));
        }
    }

    fn cooccurrence_counts(spec: &SynthSpec, events: &[SynthEvent]) -> Vec<usize> {
        let plant = spec.plant.as_ref().unwrap();
        let mut refs: Vec<Timestamp> = events.iter().filter(|e| e.role == EventRole::Maintainer).map(|e| e.sent_time).collect();
        refs.sort_unstable();
        let mut counts = vec![0; spec.slices];
        for e in events.iter().filter(|e| e.role == EventRole::Planted) {
            if near_any(&refs, e.sent_time, plant.window / 2) {
                counts[((e.sent_time - spec.start) / spec.slice_len) as usize] += 1;
            }
        }
        counts
    }

    #[test]
    fn approach_increases_cooccurrence() {
        let plant = PlantSpec { burst_every: 0, base_events: 60, ..PlantSpec::default() };
        let spec = SynthSpec { n_events: 4000, slices: 10, plant: Some(plant), ..SynthSpec::default() };
        let (events, d) = plant_trajectory(generate_event_stream(&spec).unwrap(), &spec).unwrap();
        let counts = cooccurrence_counts(&spec, &events);
        assert!(counts.windows(2).all(|w| w[1] > w[0]), "{counts:?}");
        assert!(d.slices.windows(2).all(|w| w[1].cooccurring > w[0].cooccurring));
        assert_eq!(d.expected_class, OperationClass::HitOrMiss);

        let bursty = SynthSpec { plant: Some(PlantSpec::default()), ..spec.clone() };
        let (_, d) = plant_trajectory(generate_event_stream(&bursty).unwrap(), &bursty).unwrap();
        assert_eq!(d.expected_class, OperationClass::Opportunistic);

        let rev = SynthSpec { plant: Some(PlantSpec { reverse: true, ..PlantSpec::default() }), ..spec };
        let (_, d) = plant_trajectory(generate_event_stream(&rev).unwrap(), &rev).unwrap();
        assert_eq!(d.expected_class, OperationClass::Awry);
        assert!(d.slices.first().unwrap().cooccurring > d.slices.last().unwrap().cooccurring);
    }

    #[test]
    fn missing_references_rejected() {
        let spec = SynthSpec {
            n_events: 500,
            plant: Some(PlantSpec { reference_senders: vec!["nobody".into()], ..PlantSpec::default() }),
            ..SynthSpec::default()
        };
        assert!(plant_trajectory(generate_event_stream(&spec).unwrap(), &spec).is_err());
    }

    #[test]
    fn spec_json_defaults_and_validation() {
        let s: SynthSpec = serde_json::from_str(r#"{"seed": 3, "slice_len": "1w", "burst_len": "2h"}"#).unwrap();
        assert_eq!((s.seed, s.slice_len, s.burst_len), (3, WEEK, Some(2 * HOUR)));
        let bad = SynthSpec { plant: Some(PlantSpec { approach_rate: 0.0, ..PlantSpec::default() }), ..SynthSpec::default() };
        assert_eq!(bad.validate().len(), 1);
    }
}
