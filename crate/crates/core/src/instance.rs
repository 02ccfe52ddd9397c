//! Problem instances: the device catalog, the control loops and the global limits.
//!
//! Instances are read from and written to a strict JSON document (unknown keys
//! are rejected) and can be generated from a seed for experiments.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Operating mode of a device type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Executes loop programs.
    Processor,
    /// Only forwards signals, adding its relay delay.
    Repeater,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Processor => f.write_str("processor"),
            Mode::Repeater => f.write_str("repeater"),
        }
    }
}

/// One purchasable device model.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceType {
    /// 1-based position in the catalog.
    pub id: usize,
    pub cost: f64,
    /// Physical signal channels available when the device sits at the leaf level.
    pub channels: u32,
    pub memory: f64,
    pub fail_prob: f64,
    /// Seconds per program instruction.
    pub instr_time: f64,
    pub mode: Mode,
    /// Network ports for downstream devices.
    pub max_children: u32,
    /// Forwarding delay in seconds.
    pub relay_delay: f64,
}

impl DeviceType {
    pub fn is_processor(&self) -> bool {
        self.mode == Mode::Processor
    }
}

/// Resource demands of one control loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLoop {
    /// 1-based position in the loop list.
    pub id: usize,
    pub signals: u32,
    pub mem_demand: f64,
    pub instr_count: u32,
}

/// Structure-wide limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalLimits {
    /// Number of hierarchy levels; level 1 is the root, `levels` the leaf level.
    pub levels: usize,
    /// Cap on `instr_time * sum(instr_count)` for each processor.
    pub max_cycle_time: f64,
    /// Floor on the survival probability of every loop's signal path.
    pub min_loop_reliability: f64,
    /// Cap on the summed forwarding delay of every loop's signal path.
    pub max_loop_delay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub devices: Vec<DeviceType>,
    pub loops: Vec<ControlLoop>,
    pub limits: GlobalLimits,
}

impl ProblemInstance {
    /// Looks up a device type by its 1-based id.
    pub fn device(&self, type_id: usize) -> Option<&DeviceType> {
        type_id.checked_sub(1).and_then(|i| self.devices.get(i))
    }

    pub fn control_loop(&self, loop_id: usize) -> Option<&ControlLoop> {
        loop_id.checked_sub(1).and_then(|i| self.loops.get(i))
    }

    pub fn levels(&self) -> usize {
        self.limits.levels
    }

    pub fn total_signals(&self) -> u64 {
        self.loops.iter().map(|l| l.signals as u64).sum()
    }

    /// Largest port count in the catalog.
    pub fn max_children(&self) -> u32 {
        self.devices.iter().map(|d| d.max_children).max().unwrap_or(0)
    }
}

/// A broken invariant, located by a field path such as `devices[0].fail_prob`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Stable rule id, e.g. `ControlLoop.signals ≥ 1`.
    pub rule: String,
    pub path: String,
    pub message: String,
}

impl Violation {
    fn new(rule: &str, path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            rule: rule.to_string(),
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} [{}]", self.path, self.message, self.rule)
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("invalid instance: {}", join_violations(.0))]
    Invariant(Vec<Violation>),
    #[error("generator settings: {0}")]
    Generator(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// JSON document
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceDoc {
    cost: f64,
    channels: u32,
    memory: f64,
    fail_prob: f64,
    instr_time: f64,
    mode: Mode,
    max_children: u32,
    relay_delay: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoopDoc {
    signals: u32,
    mem_demand: f64,
    instr_count: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    devices: Vec<DeviceDoc>,
    loops: Vec<LoopDoc>,
    limits: GlobalLimits,
}

impl From<InstanceDoc> for ProblemInstance {
    fn from(doc: InstanceDoc) -> Self {
        let devices = doc
            .devices
            .into_iter()
            .enumerate()
            .map(|(i, d)| DeviceType {
                id: i + 1,
                cost: d.cost,
                channels: d.channels,
                memory: d.memory,
                fail_prob: d.fail_prob,
                instr_time: d.instr_time,
                mode: d.mode,
                max_children: d.max_children,
                relay_delay: d.relay_delay,
            })
            .collect();
        let loops = doc
            .loops
            .into_iter()
            .enumerate()
            .map(|(j, l)| ControlLoop {
                id: j + 1,
                signals: l.signals,
                mem_demand: l.mem_demand,
                instr_count: l.instr_count,
            })
            .collect();
        ProblemInstance {
            devices,
            loops,
            limits: doc.limits,
        }
    }
}

impl From<&ProblemInstance> for InstanceDoc {
    fn from(inst: &ProblemInstance) -> Self {
        InstanceDoc {
            devices: inst
                .devices
                .iter()
                .map(|d| DeviceDoc {
                    cost: d.cost,
                    channels: d.channels,
                    memory: d.memory,
                    fail_prob: d.fail_prob,
                    instr_time: d.instr_time,
                    mode: d.mode,
                    max_children: d.max_children,
                    relay_delay: d.relay_delay,
                })
                .collect(),
            loops: inst
                .loops
                .iter()
                .map(|l| LoopDoc {
                    signals: l.signals,
                    mem_demand: l.mem_demand,
                    instr_count: l.instr_count,
                })
                .collect(),
            limits: inst.limits.clone(),
        }
    }
}

/// Parses and validates an instance document.
pub fn parse_instance(text: &str) -> Result<ProblemInstance, InstanceError> {
    let doc: InstanceDoc = serde_json::from_str(text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Syntax | Category::Eof | Category::Io => InstanceError::Syntax {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            },
            Category::Data => InstanceError::Schema(e.to_string()),
        }
    })?;
    let inst = ProblemInstance::from(doc);
    let violations = validate_instance(&inst);
    if violations.is_empty() {
        Ok(inst)
    } else {
        Err(InstanceError::Invariant(violations))
    }
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<ProblemInstance, InstanceError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| InstanceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_instance(&text)
}

/// Pretty-printed JSON in the instance schema.
pub fn serialize_instance(inst: &ProblemInstance) -> String {
    serde_json::to_string_pretty(&InstanceDoc::from(inst)).expect("instance serializes")
}

/// Checks every instance invariant. An empty result means the instance is valid.
pub fn validate_instance(inst: &ProblemInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    if inst.devices.is_empty() {
        out.push(Violation::new("U ≥ 1", "devices", "no device types"));
    }
    if inst.loops.is_empty() {
        out.push(Violation::new("A ≥ 1", "loops", "no control loops"));
    }
    if !inst.devices.is_empty() && !inst.devices.iter().any(DeviceType::is_processor) {
        out.push(Violation::new(
            "at least one Processor",
            "devices",
            "no processor device type",
        ));
    }

    for (i, d) in inst.devices.iter().enumerate() {
        let at = |field: &str| format!("devices[{i}].{field}");
        if d.id != i + 1 {
            out.push(Violation::new("device ids dense", at("id"), "device ids must be 1..U"));
        }
        if !(d.cost > 0.0 && d.cost.is_finite()) {
            out.push(Violation::new("DeviceType.cost > 0", at("cost"), "cost must be positive"));
        }
        if !(d.instr_time > 0.0 && d.instr_time.is_finite()) {
            out.push(Violation::new(
                "DeviceType.instr_time > 0",
                at("instr_time"),
                "instr_time must be positive",
            ));
        }
        if d.is_processor() && !(d.memory > 0.0 && d.memory.is_finite()) {
            out.push(Violation::new(
                "DeviceType.memory > 0 for Processor",
                at("memory"),
                "processor memory must be positive",
            ));
        } else if !(d.memory >= 0.0 && d.memory.is_finite()) {
            out.push(Violation::new(
                "DeviceType.memory ≥ 0",
                at("memory"),
                "memory must be non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&d.fail_prob) {
            out.push(Violation::new(
                "DeviceType.fail_prob in [0,1]",
                at("fail_prob"),
                "fail_prob out of [0,1]",
            ));
        }
        if !(d.relay_delay >= 0.0 && d.relay_delay.is_finite()) {
            out.push(Violation::new(
                "DeviceType.relay_delay ≥ 0",
                at("relay_delay"),
                "relay_delay must be non-negative",
            ));
        }
    }

    for (j, l) in inst.loops.iter().enumerate() {
        let at = |field: &str| format!("loops[{j}].{field}");
        if l.id != j + 1 {
            out.push(Violation::new("loop ids dense", at("id"), "loop ids must be 1..A"));
        }
        if l.signals < 1 {
            out.push(Violation::new(
                "ControlLoop.signals ≥ 1",
                at("signals"),
                "signals must be at least 1",
            ));
        }
        if !(l.mem_demand > 0.0 && l.mem_demand.is_finite()) {
            out.push(Violation::new(
                "ControlLoop.mem_demand > 0",
                at("mem_demand"),
                "mem_demand must be positive",
            ));
        }
        if l.instr_count < 1 {
            out.push(Violation::new(
                "ControlLoop.instr_count ≥ 1",
                at("instr_count"),
                "instr_count must be at least 1",
            ));
        }
    }

    let lim = &inst.limits;
    if lim.levels < 1 {
        out.push(Violation::new("levels ≥ 1", "limits.levels", "levels must be at least 1"));
    }
    if !(0.0..=1.0).contains(&lim.min_loop_reliability) {
        out.push(Violation::new(
            "min_loop_reliability in [0,1]",
            "limits.min_loop_reliability",
            "min_loop_reliability out of [0,1]",
        ));
    }
    if !(lim.max_cycle_time >= 0.0) {
        out.push(Violation::new(
            "max_cycle_time ≥ 0",
            "limits.max_cycle_time",
            "max_cycle_time must be non-negative",
        ));
    }
    if !(lim.max_loop_delay >= 0.0) {
        out.push(Violation::new(
            "max_loop_delay ≥ 0",
            "limits.max_loop_delay",
            "max_loop_delay must be non-negative",
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Built-in device catalogs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// One controller with no signal channels plus one 8-channel I/O module,
    /// both with four ports. Always two device types.
    PlcIo,
    /// `device_types` random catalog entries drawn from [`ValueRanges`].
    #[default]
    Random,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plc-io" => Ok(Profile::PlcIo),
            "random" => Ok(Profile::Random),
            other => Err(format!("unknown profile `{other}` (expected plc-io or random)")),
        }
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: PartialOrd + Copy> Span<T> {
    pub const fn new(lo: T, hi: T) -> Self {
        Self { lo, hi }
    }

    fn is_empty(&self) -> bool {
        !(self.lo <= self.hi)
    }
}

impl Span<f64> {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

impl Span<u32> {
    fn sample(&self, rng: &mut impl Rng) -> u32 {
        rng.gen_range(self.lo..=self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueRanges {
    pub processor_cost: Span<f64>,
    pub repeater_cost: Span<f64>,
    pub processor_channels: Span<u32>,
    pub repeater_channels: Span<u32>,
    pub processor_memory: Span<f64>,
    pub fail_prob: Span<f64>,
    pub instr_time: Span<f64>,
    pub max_children: Span<u32>,
    pub relay_delay: Span<f64>,
    pub loop_signals: Span<u32>,
    pub loop_memory: Span<f64>,
    pub loop_instructions: Span<u32>,
}

impl Default for ValueRanges {
    fn default() -> Self {
        Self {
            processor_cost: Span::new(80.0, 250.0),
            repeater_cost: Span::new(5.0, 40.0),
            processor_channels: Span::new(0, 16),
            repeater_channels: Span::new(4, 32),
            processor_memory: Span::new(200.0, 1000.0),
            fail_prob: Span::new(0.0005, 0.005),
            instr_time: Span::new(0.5e-6, 4e-6),
            max_children: Span::new(2, 8),
            relay_delay: Span::new(0.0005, 0.002),
            loop_signals: Span::new(1, 8),
            loop_memory: Span::new(1.0, 16.0),
            loop_instructions: Span::new(20, 400),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSettings {
    pub profile: Profile,
    /// Number of device types (U); ignored by [`Profile::PlcIo`].
    #[serde(rename = "u")]
    pub device_types: usize,
    /// Number of control loops (A).
    #[serde(rename = "a")]
    pub loops: usize,
    /// Number of hierarchy levels (S).
    #[serde(rename = "s")]
    pub levels: usize,
    pub seed: u64,
    pub ranges: ValueRanges,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self {
            profile: Profile::Random,
            device_types: 5,
            loops: 200,
            levels: 4,
            seed: 1,
            ranges: ValueRanges::default(),
        }
    }
}

/// Fixed catalog of the two-device plc-io profile: an expensive controller without
/// I/O channels and a cheap 8-channel I/O module, both with four ports.
pub fn plc_io_devices() -> Vec<DeviceType> {
    vec![
        DeviceType {
            id: 1,
            cost: 100.0,
            channels: 0,
            memory: 512.0,
            fail_prob: 0.001,
            instr_time: 1e-6,
            mode: Mode::Processor,
            max_children: 4,
            relay_delay: 0.0,
        },
        DeviceType {
            id: 2,
            cost: 10.0,
            channels: 8,
            memory: 0.0,
            fail_prob: 0.002,
            instr_time: 1e-6,
            mode: Mode::Repeater,
            max_children: 4,
            relay_delay: 0.001,
        },
    ]
}

/// Limits used by the plc-io profile and its fixtures.
pub fn plc_io_limits(levels: usize) -> GlobalLimits {
    GlobalLimits {
        levels,
        max_cycle_time: 0.1,
        min_loop_reliability: 0.99,
        max_loop_delay: 0.01,
    }
}

/// Deterministically generates an instance from `settings` and `seed`.
///
/// Random catalogs always put a Processor at id 1 and, when `U ≥ 2`, a Repeater
/// at id 2. The catalog is then nudged so that the largest tree the ports allow
/// offers comfortably more channels than the loops need, and a root of type 1
/// alone has enough memory and cycle time for every loop.
pub fn generate_instance(
    settings: &GeneratorSettings,
    seed: u64,
) -> Result<ProblemInstance, InstanceError> {
    let gen_err = |m: &str| Err(InstanceError::Generator(m.to_string()));
    if settings.loops < 1 {
        return gen_err("A must be at least 1");
    }
    if settings.levels < 1 {
        return gen_err("S must be at least 1");
    }
    if settings.profile == Profile::Random && settings.device_types < 1 {
        return gen_err("U must be at least 1");
    }
    let r = &settings.ranges;
    let spans_f = [
        ("processor_cost", r.processor_cost),
        ("repeater_cost", r.repeater_cost),
        ("processor_memory", r.processor_memory),
        ("fail_prob", r.fail_prob),
        ("instr_time", r.instr_time),
        ("relay_delay", r.relay_delay),
        ("loop_memory", r.loop_memory),
    ];
    for (name, span) in spans_f {
        if span.is_empty() || !span.lo.is_finite() || !span.hi.is_finite() {
            return Err(InstanceError::Generator(format!("empty range for {name}")));
        }
    }
    let spans_u = [
        ("processor_channels", r.processor_channels),
        ("repeater_channels", r.repeater_channels),
        ("max_children", r.max_children),
        ("loop_signals", r.loop_signals),
        ("loop_instructions", r.loop_instructions),
    ];
    for (name, span) in spans_u {
        if span.is_empty() {
            return Err(InstanceError::Generator(format!("empty range for {name}")));
        }
    }
    if r.processor_cost.lo <= 0.0 || r.repeater_cost.lo <= 0.0 {
        return gen_err("costs must be positive");
    }
    if r.processor_memory.lo <= 0.0 || r.loop_memory.lo <= 0.0 || r.instr_time.lo <= 0.0 {
        return gen_err("memory and instruction time ranges must be positive");
    }
    if r.fail_prob.lo < 0.0 || r.fail_prob.hi > 1.0 || r.relay_delay.lo < 0.0 {
        return gen_err("fail_prob must lie in [0,1] and relay_delay must be non-negative");
    }
    if r.loop_signals.lo < 1 || r.loop_instructions.lo < 1 {
        return gen_err("loops need at least one signal and one instruction");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = match settings.profile {
        Profile::PlcIo => generate_plc_io(settings, &mut rng),
        Profile::Random => generate_random(settings, &mut rng),
    };
    let violations = validate_instance(&inst);
    if violations.is_empty() {
        Ok(inst)
    } else {
        Err(InstanceError::Invariant(violations))
    }
}

fn generate_loops(count: usize, r: &ValueRanges, rng: &mut ChaCha8Rng) -> Vec<ControlLoop> {
    (1..=count)
        .map(|id| ControlLoop {
            id,
            signals: r.loop_signals.sample(rng),
            // half-unit granularity keeps instance files readable
            mem_demand: (r.loop_memory.sample(rng) * 2.0).round().max(1.0) / 2.0,
            instr_count: r.loop_instructions.sample(rng),
        })
        .collect()
}

fn generate_plc_io(settings: &GeneratorSettings, rng: &mut ChaCha8Rng) -> ProblemInstance {
    let mut ranges = settings.ranges.clone();
    // a loop must fit on one 8-channel module
    ranges.loop_signals = Span::new(1, 3);
    ranges.loop_memory = Span::new(1.0, 8.0);
    ranges.loop_instructions = Span::new(50, 500);
    ProblemInstance {
        devices: plc_io_devices(),
        loops: generate_loops(settings.loops, &ranges, rng),
        limits: plc_io_limits(settings.levels),
    }
}

fn generate_random(settings: &GeneratorSettings, rng: &mut ChaCha8Rng) -> ProblemInstance {
    let r = &settings.ranges;
    let levels = settings.levels;
    let loops = generate_loops(settings.loops, r, rng);

    let mut devices: Vec<DeviceType> = (1..=settings.device_types)
        .map(|id| {
            let mode = match id {
                1 => Mode::Processor,
                2 => Mode::Repeater,
                _ if rng.gen_bool(0.5) => Mode::Processor,
                _ => Mode::Repeater,
            };
            let (cost, channels, memory, relay_delay) = match mode {
                Mode::Processor => (
                    r.processor_cost.sample(rng).round().max(1.0),
                    r.processor_channels.sample(rng),
                    r.processor_memory.sample(rng).round().max(1.0),
                    r.relay_delay.sample(rng) * 0.5,
                ),
                Mode::Repeater => (
                    r.repeater_cost.sample(rng).round().max(1.0),
                    r.repeater_channels.sample(rng),
                    0.0,
                    r.relay_delay.sample(rng),
                ),
            };
            DeviceType {
                id,
                cost,
                channels,
                memory,
                fail_prob: r.fail_prob.sample(rng),
                instr_time: r.instr_time.sample(rng),
                mode,
                max_children: r.max_children.sample(rng),
                relay_delay,
            }
        })
        .collect();

    let total_signals: u64 = loops.iter().map(|l| l.signals as u64).sum();
    let total_memory: f64 = loops.iter().map(|l| l.mem_demand).sum();
    let total_instr: u64 = loops.iter().map(|l| l.instr_count as u64).sum();
    let max_signals = loops.iter().map(|l| l.signals).max().unwrap_or(1);
    let max_mem = loops.iter().map(|l| l.mem_demand).fold(0.0, f64::max);
    let max_instr = loops.iter().map(|l| l.instr_count).max().unwrap_or(1);

    // Every level above the leaves needs ports.
    if levels > 1 {
        for d in devices.iter_mut() {
            d.max_children = d.max_children.max(1);
        }
    }
    let fan = devices.iter().map(|d| d.max_children).max().unwrap_or(1).max(1) as f64;
    let max_leaves = fan.powi(levels as i32 - 1);
    // A tree with the catalog's mean fan-out should already carry every signal.
    if levels > 1 {
        let u = devices.len() as f64;
        let mean_fan = devices.iter().map(|d| (d.max_children as f64 + 1.0) / 2.0).sum::<f64>() / u;
        let mean_channels = devices.iter().map(|d| d.channels as f64).sum::<f64>() / u;
        let needed = 1.5 * total_signals as f64 / mean_fan.powi(levels as i32 - 1);
        if mean_channels > 0.0 && mean_channels < needed {
            let scale = needed / mean_channels;
            for d in devices.iter_mut() {
                d.channels = (d.channels as f64 * scale).ceil() as u32;
            }
        }
    }
    // One device must hold the widest loop; the widest tree must hold them all.
    let channel_target = if levels == 1 {
        total_signals as f64
    } else {
        (1.5 * total_signals as f64 / max_leaves).ceil().max(max_signals as f64)
    };
    let leaf_candidate = if levels == 1 {
        0
    } else {
        devices
            .iter()
            .enumerate()
            .max_by_key(|(_, d)| d.channels)
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    let widest = &mut devices[leaf_candidate];
    widest.channels = widest.channels.max(channel_target as u32);

    // The head processor type can run every loop on its own.
    let head = &mut devices[0];
    let mem_target = (1.2 * total_memory).max(max_mem);
    if head.memory < mem_target {
        head.memory = mem_target.ceil();
    }

    let max_cycle_time = {
        let slowest = devices
            .iter()
            .filter(|d| d.is_processor())
            .map(|d| d.instr_time)
            .fold(0.0, f64::max);
        let aggregate = 1.2 * devices[0].instr_time * total_instr as f64;
        let single = slowest * max_instr as f64;
        // round up to whole microseconds
        (aggregate.max(single) * 1e6).ceil() / 1e6
    };

    let worst_fail = devices.iter().map(|d| d.fail_prob).fold(0.0, f64::max);
    let worst_delay = devices.iter().map(|d| d.relay_delay).fold(0.0, f64::max);
    let floor = (1.0 - worst_fail).powi(levels as i32);
    let min_loop_reliability = if floor >= 0.95 { 0.95 } else { (floor * 1e4).floor() / 1e4 };
    let max_loop_delay = ((worst_delay * levels as f64) * 1e4).ceil() / 1e4;

    ProblemInstance {
        devices,
        loops,
        limits: GlobalLimits {
            levels,
            max_cycle_time,
            min_loop_reliability,
            max_loop_delay: max_loop_delay.max(0.001),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_doc() -> &'static str {
        r#"{
            "devices": [
                {"cost": 100.0, "channels": 0, "memory": 512.0, "fail_prob": 0.001,
                 "instr_time": 1e-6, "mode": "processor", "max_children": 4, "relay_delay": 0.0},
                {"cost": 10.0, "channels": 8, "memory": 0.0, "fail_prob": 0.002,
                 "instr_time": 1e-6, "mode": "repeater", "max_children": 4, "relay_delay": 0.001}
            ],
            "loops": [{"signals": 4, "mem_demand": 2.0, "instr_count": 100}],
            "limits": {"levels": 3, "max_cycle_time": 0.1, "min_loop_reliability": 0.99,
                       "max_loop_delay": 0.01}
        }"#
    }

    #[test]
    fn parses_minimal_document() {
        let inst = parse_instance(minimal_doc()).unwrap();
        assert_eq!(inst.devices.len(), 2);
        assert_eq!(inst.loops.len(), 1);
        assert_eq!(inst.levels(), 3);
        assert_eq!(inst.devices[1].id, 2);
        assert_eq!(inst.devices[1].mode, Mode::Repeater);
    }

    #[test]
    fn fail_prob_out_of_range_is_rejected() {
        let doc = minimal_doc().replacen("0.001", "1.5", 1);
        match parse_instance(&doc) {
            Err(InstanceError::Invariant(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].message, "fail_prob out of [0,1]");
                assert_eq!(v[0].path, "devices[0].fail_prob");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn no_processor_is_rejected() {
        let doc = minimal_doc().replace("\"processor\"", "\"repeater\"");
        let err = parse_instance(&doc).unwrap_err();
        assert!(err.to_string().contains("no processor device type"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_instance("{\n  \"devices\": [,]\n}").unwrap_err();
        match err {
            InstanceError::Syntax { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_schema_errors() {
        let doc = minimal_doc().replacen("\"cost\": 100.0", "\"cost\": 100.0, \"colour\": 1", 1);
        let err = parse_instance(&doc).unwrap_err();
        assert!(matches!(err, InstanceError::Schema(ref m) if m.contains("colour")), "{err}");
    }

    #[test]
    fn missing_key_is_schema_error() {
        let doc = minimal_doc().replacen("\"relay_delay\": 0.0", "\"spare\": 0", 1);
        assert!(matches!(parse_instance(&doc), Err(InstanceError::Schema(_))));
    }

    #[test]
    fn validate_reports_each_rule() {
        let mut inst = parse_instance(minimal_doc()).unwrap();
        assert!(validate_instance(&inst).is_empty());

        inst.loops[0].signals = 0;
        let v = validate_instance(&inst);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "ControlLoop.signals ≥ 1");

        inst.loops.clear();
        let v = validate_instance(&inst);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "A ≥ 1");
    }

    #[test]
    fn serialize_then_parse_is_identity() {
        let inst = parse_instance(minimal_doc()).unwrap();
        let back = parse_instance(&serialize_instance(&inst)).unwrap();
        assert_eq!(inst, back);
    }

    #[test]
    fn generator_sizes_and_determinism() {
        let settings = GeneratorSettings {
            device_types: 5,
            loops: 200,
            levels: 4,
            ..Default::default()
        };
        let a = generate_instance(&settings, 1).unwrap();
        let b = generate_instance(&settings, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.devices.len(), 5);
        assert_eq!(a.loops.len(), 200);
        assert_eq!(a.levels(), 4);
        assert_eq!(a.devices[0].mode, Mode::Processor);
        assert_eq!(a.devices[1].mode, Mode::Repeater);
        let c = generate_instance(&settings, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn plc_io_profile_matches_two_device_setup() {
        let settings = GeneratorSettings {
            profile: Profile::PlcIo,
            loops: 50,
            levels: 3,
            ..Default::default()
        };
        let inst = generate_instance(&settings, 7).unwrap();
        assert_eq!(inst.devices.len(), 2);
        assert_eq!(inst.loops.len(), 50);
        let (plc, io) = (&inst.devices[0], &inst.devices[1]);
        assert_eq!((plc.mode, plc.channels, plc.max_children), (Mode::Processor, 0, 4));
        assert_eq!((io.mode, io.channels, io.max_children), (Mode::Repeater, 8, 4));
        assert_eq!((plc.cost, io.cost), (100.0, 10.0));
    }

    #[test]
    fn impossible_ranges_are_rejected() {
        let mut settings = GeneratorSettings::default();
        settings.ranges.processor_cost = Span::new(300.0, 100.0);
        assert!(matches!(
            generate_instance(&settings, 1),
            Err(InstanceError::Generator(_))
        ));
        let settings = GeneratorSettings {
            loops: 0,
            ..Default::default()
        };
        assert!(generate_instance(&settings, 1).is_err());
    }

    #[test]
    fn generator_is_feasibility_biased() {
        for seed in 0..50 {
            for (u, a, s) in [(1, 5, 1), (2, 5, 2), (3, 5, 3), (5, 200, 4), (4, 60, 3)] {
                let settings = GeneratorSettings {
                    device_types: u,
                    loops: a,
                    levels: s,
                    ..Default::default()
                };
                let inst = generate_instance(&settings, seed).unwrap();
                let fan = inst.max_children().max(1) as f64;
                let leaves = fan.powi(s as i32 - 1);
                let widest = inst.devices.iter().map(|d| d.channels).max().unwrap() as f64;
                assert!(leaves * widest >= inst.total_signals() as f64, "seed {seed}");
                if u >= 2 {
                    assert!(inst.devices.iter().any(|d| d.mode == Mode::Repeater));
                }
            }
        }
    }

    #[test]
    fn settings_deserialize_with_defaults() {
        let s: GeneratorSettings =
            serde_json::from_str(r#"{"profile": "plc-io", "a": 50, "s": 3, "seed": 7}"#).unwrap();
        assert_eq!(s.profile, Profile::PlcIo);
        assert_eq!((s.loops, s.levels, s.seed), (50, 3, 7));
        assert_eq!(s.ranges, ValueRanges::default());
    }
}
