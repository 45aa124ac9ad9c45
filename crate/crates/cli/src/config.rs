//! Sectioned `key = value` configuration.
//!
//! ```text
//! # comment
//! [run]
//! alpha = 0.5
//! n = 4096
//! ic = gaussian(0.2,1,0)
//!
//! [experiment]
//! lambda = 2
//! ```
//!
//! Keys before the first section header belong to `[run]`. Later entries
//! override earlier ones, which is how `--set section.key=value` flags take
//! precedence over the file. Unknown sections and keys are errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use fkdv_core::asymptotics::{ProbeKind, ProbeParams, QuadSpec, Regime, SteinTarget};
use fkdv_core::{InitialCondition, SimConfig};

use crate::error::CliError;
use crate::manifest::SCHEMA_VERSION;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    section: String,
    key: String,
    value: String,
    origin: String,
}

/// Raw entries in file/flag order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Document {
    entries: Vec<Entry>,
}

const SECTIONS: &[&str] = &["run", "experiment", "stein", "probe", "output", "manifest"];

impl Document {
    pub fn parse(text: &str, source: &str) -> Result<Document, CliError> {
        let mut doc = Document::default();
        let mut section = "run".to_string();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let origin = format!("{source}:{}", i + 1);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::Config(format!("{origin}: malformed section header '{line}'")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(CliError::Config(format!("{origin}: unknown section '[{name}]'")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}: expected key = value, got '{line}'")))?;
            doc.entries.push(Entry {
                section: section.clone(),
                key: k.trim().to_string(),
                value: v.trim().to_string(),
                origin,
            });
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Document, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Document::parse(&text, &path.display().to_string())
    }

    /// Applies `section.key=value` (or `key=value` for `[run]`).
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (lhs, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got '{assignment}'")))?;
        let lhs = lhs.trim();
        let (section, key) = match lhs.split_once('.') {
            Some((s, k)) if SECTIONS.contains(&s) => (s, k),
            Some((s, _)) => return Err(CliError::Config(format!("--set: unknown section '{s}'"))),
            None => ("run", lhs),
        };
        self.entries.push(Entry {
            section: section.into(),
            key: key.into(),
            value: v.trim().into(),
            origin: "--set".into(),
        });
        Ok(())
    }

    fn section(&self, name: &str) -> Section {
        let mut s = Section { name: name.to_string(), entries: vec![] };
        for e in self.entries.iter().filter(|e| e.section == name) {
            // Later entries override earlier ones.
            s.entries.retain(|x: &Entry| x.key != e.key);
            s.entries.push(e.clone());
        }
        s
    }
}

struct Section {
    name: String,
    entries: Vec<Entry>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<Entry> {
        let pos = self.entries.iter().position(|e| e.key == key)?;
        Some(self.entries.remove(pos))
    }

    fn get<T: FromStr>(&mut self, key: &str, what: &str) -> Result<Option<T>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|_| {
                CliError::Config(format!(
                    "{}: {}.{} = '{}' is not {what}",
                    e.origin, self.name, key, e.value
                ))
            }),
        }
    }

    fn real(&mut self, key: &str) -> Result<Option<f64>, CliError> {
        self.get(key, "a real number")
    }

    fn int(&mut self, key: &str) -> Result<Option<usize>, CliError> {
        self.get(key, "a non-negative integer")
    }

    fn flag(&mut self, key: &str) -> Result<Option<bool>, CliError> {
        self.get(key, "true or false")
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(e) if e.value.is_empty() => Ok(Some(vec![])),
            Some(e) => e
                .value
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map(Some)
                .map_err(|_| {
                    CliError::Config(format!(
                        "{}: {}.{} = '{}' is not a comma-separated list of reals",
                        e.origin, self.name, key, e.value
                    ))
                }),
        }
    }

    fn text(&mut self, key: &str) -> Option<String> {
        self.take(key).map(|e| e.value)
    }

    fn required<T>(&self, key: &str, v: Option<T>) -> Result<T, CliError> {
        v.ok_or_else(|| CliError::Config(format!("missing required key {}.{key}", self.name)))
    }

    fn finish(self) -> Result<(), CliError> {
        match self.entries.first() {
            None => Ok(()),
            Some(e) => Err(CliError::Config(format!(
                "{}: unknown key '{}' in [{}]",
                e.origin, e.key, self.name
            ))),
        }
    }
}

/// Parameters of the `experiment` command.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentParams {
    pub name: Option<String>,
    pub lambda: f64,
    pub t1: f64,
    pub t2: f64,
    pub r_probe: Vec<f64>,
    pub l_list: Vec<f64>,
    pub i3_dt: f64,
    pub richardson_dt: f64,
    pub picard_t: f64,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            name: None,
            lambda: 2.0,
            t1: 0.5,
            t2: 1.0,
            r_probe: vec![],
            l_list: vec![200.0, 400.0, 800.0],
            i3_dt: 0.02,
            richardson_dt: 0.02,
            picard_t: 0.05,
        }
    }
}

/// Parameters of the `stein` command.
#[derive(Clone, Debug, PartialEq)]
pub struct SteinParams {
    pub b: f64,
    pub target: String,
    pub eta: Vec<f64>,
    pub quad: QuadSpec,
    pub regime: Option<Regime>,
}

impl Default for SteinParams {
    fn default() -> Self {
        SteinParams {
            b: 0.5,
            target: "sign_propagator(1)".into(),
            eta: vec![0.5, 1.0, 2.0],
            quad: QuadSpec::default(),
            regime: None,
        }
    }
}

/// Parameters of the `probe` command.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub params: ProbeParams,
    pub pairs: usize,
    pub n: usize,
    pub length: f64,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            kind: ProbeKind::HilbertFrac,
            params: ProbeParams::defaults(ProbeKind::HilbertFrac),
            pairs: 50,
            n: 512,
            length: 200.0,
            seed: 0,
        }
    }
}

/// Everything a command needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub sim: SimConfig,
    pub seed: Option<u64>,
    pub experiment: ExperimentParams,
    pub stein: SteinParams,
    pub probe: ProbeSpec,
    pub out_dir: Option<PathBuf>,
}

impl RunSpec {
    /// Builds and validates the run from a document; `alpha`, `t_final` and
    /// `ic` are required, every other `[run]` key defaults to the reference
    /// resolution.
    pub fn from_document(doc: &Document) -> Result<RunSpec, CliError> {
        let mut man = doc.section("manifest");
        if let Some(v) = man.int("schema_version")? {
            if v as u32 != SCHEMA_VERSION {
                return Err(CliError::Config(format!(
                    "manifest schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )));
            }
        }
        // The remaining manifest keys are informational.
        drop(man);

        let mut run = doc.section("run");
        let alpha = run.real("alpha")?;
        let alpha = run.required("alpha", alpha)?;
        if alpha == 0.0 {
            return Err(CliError::Config("run.alpha: alpha must be nonzero".into()));
        }
        let t_final = run.real("t_final")?;
        let t_final = run.required("t_final", t_final)?;
        let ic_text = run.text("ic");
        let ic_text = run.required("ic", ic_text)?;
        let mut ic = InitialCondition::from_str(&ic_text)
            .map_err(|e| CliError::Config(format!("run.ic: {e}")))?;
        if run.flag("project_mean")?.unwrap_or(false) {
            ic = ic.projected();
        }
        let seed: Option<u64> = run.get("seed", "a non-negative integer")?;
        if let Some(s) = seed {
            ic = ic.with_seed(s);
        }
        let mut sim = SimConfig::reference(alpha, ic, t_final);
        if let Some(v) = run.int("n")? {
            sim.n = v;
        }
        if let Some(v) = run.real("length")? {
            sim.length = v;
        }
        if let Some(v) = run.real("dt")? {
            sim.dt = v;
        }
        if let Some(v) = run.flag("dealias")? {
            sim.dealias = v;
        }
        if let Some(v) = run.int("diag_every")? {
            sim.diag_every = v;
        }
        if let Some(v) = run.real("tail_tol")? {
            sim.tail_tol = v;
        }
        if let Some(v) = run.list("weight_orders")? {
            sim.weight_orders = v;
        }
        if let Some(v) = run.flag("nonlinear")? {
            sim.nonlinear = v;
        }
        if let Some(v) = run.flag("extended")? {
            sim.extended = v;
        }
        if let Some(v) = run.int("store_every")? {
            sim.store_every = v;
        }
        run.finish()?;
        sim.validate().map_err(|e| match e {
            fkdv_core::Error::Config(m) => CliError::Config(format!("[run] {m}")),
            other => CliError::Core(other),
        })?;

        let mut ex = doc.section("experiment");
        let mut experiment = ExperimentParams { name: ex.text("name"), ..Default::default() };
        macro_rules! real_into {
            ($sec:ident, $dst:expr, $key:literal) => {
                if let Some(v) = $sec.real($key)? {
                    $dst = v;
                }
            };
        }
        real_into!(ex, experiment.lambda, "lambda");
        real_into!(ex, experiment.t1, "t1");
        real_into!(ex, experiment.t2, "t2");
        real_into!(ex, experiment.i3_dt, "i3_dt");
        real_into!(ex, experiment.richardson_dt, "richardson_dt");
        real_into!(ex, experiment.picard_t, "picard_t");
        if let Some(v) = ex.list("r_probe")? {
            experiment.r_probe = v;
        }
        if let Some(v) = ex.list("l_list")? {
            experiment.l_list = v;
        }
        ex.finish()?;

        let mut st = doc.section("stein");
        let mut stein = SteinParams::default();
        real_into!(st, stein.b, "b");
        if let Some(t) = st.text("target") {
            stein.target = t;
        }
        if let Some(v) = st.list("eta")? {
            stein.eta = v;
        }
        real_into!(st, stein.quad.delta, "delta");
        real_into!(st, stein.quad.y_max, "y_max");
        if let Some(v) = st.int("n_panels")? {
            stein.quad.n_panels = v;
        }
        if let Some(r) = st.text("regime") {
            stein.regime = Some(r.parse().map_err(|e| CliError::Config(format!("stein.regime: {e}")))?);
        }
        st.finish()?;
        parse_target(&stein.target)?;

        let mut pr = doc.section("probe");
        let mut probe = ProbeSpec::default();
        if let Some(k) = pr.text("kind") {
            probe.kind = k.parse().map_err(|e| CliError::Config(format!("probe.kind: {e}")))?;
            probe.params = ProbeParams::defaults(probe.kind);
        }
        real_into!(pr, probe.params.beta, "beta");
        real_into!(pr, probe.params.gamma, "gamma");
        if let Some(v) = pr.get::<u32>("l", "a non-negative integer")? {
            probe.params.l = v;
        }
        if let Some(v) = pr.get::<u32>("m", "a non-negative integer")? {
            probe.params.m = v;
        }
        real_into!(pr, probe.params.cutoff, "cutoff");
        real_into!(pr, probe.length, "length");
        if let Some(v) = pr.int("pairs")? {
            probe.pairs = v;
        }
        if let Some(v) = pr.int("n")? {
            probe.n = v;
        }
        if let Some(v) = pr.get::<u64>("seed", "a non-negative integer")? {
            probe.seed = v;
        }
        pr.finish()?;
        probe
            .params
            .validate(probe.kind)
            .map_err(|e| CliError::Config(format!("probe: {e}")))?;

        let mut out = doc.section("output");
        let out_dir = out.text("out_dir").map(PathBuf::from);
        out.finish()?;

        Ok(RunSpec { sim, seed, experiment, stein, probe, out_dir })
    }

    /// Applies a `--seed` flag: random_band data and the probe ensemble.
    pub fn with_seed(mut self, seed: u64) -> RunSpec {
        self.seed = Some(seed);
        self.sim.ic = self.sim.ic.clone().with_seed(seed);
        self.probe.seed = seed;
        self
    }
}

/// Parses a Stein target such as `power_cutoff(0.3)` or `weight(0.5,4)`.
pub fn parse_target(s: &str) -> Result<SteinTarget, CliError> {
    let bad = |why: &str| CliError::Config(format!("stein.target '{s}': {why}"));
    let s = s.trim();
    let open = s.find('(').ok_or_else(|| bad("expected name(args)"))?;
    let inner = s[open + 1..].strip_suffix(')').ok_or_else(|| bad("missing ')'"))?;
    let args: Vec<f64> = inner
        .split(',')
        .map(|a| a.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("arguments must be real numbers"))?;
    let want = |k: usize| {
        if args.len() == k {
            Ok(())
        } else {
            Err(bad(&format!("takes {k} argument(s)")))
        }
    };
    let target = match &s[..open] {
        "constant" => {
            want(1)?;
            SteinTarget::Constant(args[0])
        }
        "power_cutoff" => {
            want(1)?;
            SteinTarget::PowerCutoff { beta: args[0] }
        }
        "signed_power_cutoff" => {
            want(1)?;
            SteinTarget::SignedPowerCutoff { beta: args[0] }
        }
        "propagator" => {
            want(2)?;
            SteinTarget::Propagator { alpha: args[0], t: args[1] }
        }
        "sign_propagator" => {
            want(1)?;
            SteinTarget::SignPropagator { t: args[0] }
        }
        "weight" => {
            want(2)?;
            SteinTarget::weight(args[0], args[1]).map_err(|e| bad(&e.to_string()))?
        }
        "damped_propagator" => {
            want(2)?;
            SteinTarget::DampedPropagator { alpha: args[0], t: args[1] }
        }
        "damped_sign_propagator" => {
            want(1)?;
            SteinTarget::DampedSignPropagator { t: args[0] }
        }
        "damped_power" => {
            want(1)?;
            SteinTarget::DampedPower { beta: args[0] }
        }
        other => return Err(bad(&format!("unknown target '{other}'"))),
    };
    target.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(target)
}

/// Echo of a spec in the configuration format; parsing it back yields the
/// same spec.
pub fn echo(spec: &RunSpec) -> String {
    let c = &spec.sim;
    let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    let mut ic = c.ic.clone();
    ic.zero_mean_projected = false;
    let mut s = String::new();
    s.push_str("[run]\n");
    s.push_str(&format!("alpha = {:?}\n", c.alpha));
    s.push_str(&format!("n = {}\n", c.n));
    s.push_str(&format!("length = {:?}\n", c.length));
    s.push_str(&format!("dt = {:?}\n", c.dt));
    s.push_str(&format!("t_final = {:?}\n", c.t_final));
    s.push_str(&format!("dealias = {}\n", c.dealias));
    s.push_str(&format!("diag_every = {}\n", c.diag_every));
    s.push_str(&format!("ic = {ic}\n"));
    s.push_str(&format!("project_mean = {}\n", c.ic.zero_mean_projected));
    if let Some(seed) = spec.seed {
        s.push_str(&format!("seed = {seed}\n"));
    }
    s.push_str(&format!("tail_tol = {:?}\n", c.tail_tol));
    s.push_str(&format!("weight_orders = {}\n", list(&c.weight_orders)));
    s.push_str(&format!("nonlinear = {}\n", c.nonlinear));
    s.push_str(&format!("extended = {}\n", c.extended));
    s.push_str(&format!("store_every = {}\n", c.store_every));

    let e = &spec.experiment;
    s.push_str("\n[experiment]\n");
    if let Some(n) = &e.name {
        s.push_str(&format!("name = {n}\n"));
    }
    s.push_str(&format!("lambda = {:?}\nt1 = {:?}\nt2 = {:?}\n", e.lambda, e.t1, e.t2));
    s.push_str(&format!("r_probe = {}\nl_list = {}\n", list(&e.r_probe), list(&e.l_list)));
    s.push_str(&format!(
        "i3_dt = {:?}\nrichardson_dt = {:?}\npicard_t = {:?}\n",
        e.i3_dt, e.richardson_dt, e.picard_t
    ));

    let st = &spec.stein;
    s.push_str("\n[stein]\n");
    s.push_str(&format!("b = {:?}\ntarget = {}\neta = {}\n", st.b, st.target, list(&st.eta)));
    s.push_str(&format!(
        "delta = {:?}\ny_max = {:?}\nn_panels = {}\n",
        st.quad.delta, st.quad.y_max, st.quad.n_panels
    ));
    if let Some(r) = st.regime {
        s.push_str(&format!("regime = {r}\n"));
    }

    let p = &spec.probe;
    s.push_str("\n[probe]\n");
    s.push_str(&format!("kind = {}\n", p.kind));
    s.push_str(&format!(
        "beta = {:?}\ngamma = {:?}\nl = {}\nm = {}\ncutoff = {:?}\n",
        p.params.beta, p.params.gamma, p.params.l, p.params.m, p.params.cutoff
    ));
    s.push_str(&format!("pairs = {}\nn = {}\nlength = {:?}\nseed = {}\n", p.pairs, p.n, p.length, p.seed));

    if let Some(d) = &spec.out_dir {
        s.push_str(&format!("\n[output]\nout_dir = {}\n", d.display()));
    }
    s
}
