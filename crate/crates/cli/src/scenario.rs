//! Scenario files: TOML parsed into a validated [`Scenario`], reporting every
//! problem found with the dotted path of the offending field.

use std::fmt;

use toml::{Table, Value};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunKind {
    TreeSolve,
    Penalize,
    LinkCheck,
    DynkinOracle,
    SaddleVerify,
    McSolve,
    ExampleBs,
}

impl RunKind {
    pub const ALL: [(&'static str, RunKind); 7] = [
        ("tree-solve", RunKind::TreeSolve),
        ("penalize", RunKind::Penalize),
        ("link-check", RunKind::LinkCheck),
        ("dynkin-oracle", RunKind::DynkinOracle),
        ("saddle-verify", RunKind::SaddleVerify),
        ("mc-solve", RunKind::McSolve),
        ("example-bs", RunKind::ExampleBs),
    ];

    pub fn name(&self) -> &'static str {
        Self::ALL.iter().find(|(_, k)| k == self).map(|(n, _)| *n).unwrap_or("?")
    }

    fn needs_game(&self) -> bool {
        matches!(self, RunKind::DynkinOracle | RunKind::SaddleVerify)
    }
}

impl fmt::Display for RunKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A function of `(t, x)`, with `x = B` on the lattice and `x = S` when an
/// asset is simulated.
#[derive(Clone, Debug, PartialEq)]
pub enum Rule {
    Constant(f64),
    /// `a + b x + c t`
    Affine { a: f64, b: f64, c: f64 },
    /// `scale · max(x - strike, 0) + shift`
    Call { strike: f64, scale: f64, shift: f64 },
    /// `a + b tanh(x)`
    Tanh { a: f64, b: f64 },
}

impl Rule {
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match *self {
            Rule::Constant(v) => v,
            Rule::Affine { a, b, c } => a + b * x + c * t,
            Rule::Call { strike, scale, shift } => scale * (x - strike).max(0.0) + shift,
            Rule::Tanh { a, b } => a + b * x.tanh(),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Constant(v) => write!(f, "constant {v}"),
            Rule::Affine { a, b, c } => write!(f, "affine {a} + {b}·x + {c}·t"),
            Rule::Call { strike, scale, shift } => write!(f, "call {scale}·(x - {strike})⁺ + {shift}"),
            Rule::Tanh { a, b } => write!(f, "tanh {a} + {b}·tanh(x)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub n_steps: usize,
    pub dt: f64,
    pub increment: Option<f64>,
    pub up_prob: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observe {
    Current,
    Terminal,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DefaultSpec {
    None,
    Deterministic(Vec<f64>),
    Hazard {
        base: f64,
        slope: f64,
        observe: Observe,
        max_prob: f64,
    },
    Table(Vec<Vec<f64>>),
    Cox(Rule),
}

impl DefaultSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DefaultSpec::None => "none",
            DefaultSpec::Deterministic(_) => "deterministic",
            DefaultSpec::Hazard { .. } => "hazard",
            DefaultSpec::Table(_) => "table",
            DefaultSpec::Cox(_) => "cox",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DriverForm {
    Zero,
    Generator(Rule),
    Linear { r: f64, theta: f64, g: Option<Rule> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GameForm {
    pub q: Rule,
    pub xi1: Rule,
    pub xi2: Rule,
    pub theta: usize,
    pub negative_control: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyModeSpec {
    Lower,
    Upper,
    Double,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenalizeSpec {
    pub levels: Vec<f64>,
    pub mode: PenaltyModeSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinksSpec {
    pub levels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IncrementSpec {
    Gaussian,
    TwoPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisSpec {
    Polynomial(usize),
    Piecewise(usize),
    Saturated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McSpec {
    pub paths: usize,
    pub increments: IncrementSpec,
    /// Enumerate every path instead of sampling (two-point increments).
    pub enumerate: bool,
    pub basis: BasisSpec,
    pub ridge: f64,
    pub integrated: bool,
    pub bootstrap: usize,
    pub compare_tree: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BsSpec {
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Volatility after `horizon / 2`, when it changes.
    pub sigma_late: Option<f64>,
    pub sigma_min: f64,
    pub s0: f64,
    pub strike: f64,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub intensity: f64,
    pub recovery: f64,
    pub degree: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tolerances {
    pub skorokhod: f64,
    pub balance: f64,
    pub penalty: f64,
    pub link: f64,
    pub link_final: f64,
    pub link_slack: f64,
    pub game: f64,
    pub saddle: f64,
    pub std_errors: f64,
    pub tree: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            skorokhod: 0.0,
            balance: 1e-12,
            penalty: 1e-3,
            link: 1e-10,
            link_final: 5e-2,
            link_slack: 1.1,
            game: 1e-9,
            saddle: 1e-9,
            std_errors: 3.0,
            tree: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub run: RunKind,
    pub seed: u64,
    pub beta: f64,
    pub model: ModelSpec,
    pub default: DefaultSpec,
    pub driver: DriverForm,
    pub terminal: Rule,
    pub lower: Option<Rule>,
    pub upper: Option<Rule>,
    pub game: Option<GameForm>,
    pub penalize: PenalizeSpec,
    pub links: LinksSpec,
    pub mc: McSpec,
    pub bs: BsSpec,
    pub tol: Tolerances,
}

/// Collects field errors while walking the document.
struct Walker {
    errors: Vec<String>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

impl Walker {
    fn err(&mut self, path: &str, msg: impl fmt::Display) {
        self.errors.push(format!("{path}: {msg}"));
    }

    fn keys(&mut self, t: &Table, path: &str, allowed: &[&str]) {
        for k in t.keys() {
            if !allowed.contains(&k.as_str()) {
                self.err(&join(path, k), format!("unknown key (expected one of: {})", allowed.join(", ")));
            }
        }
    }

    fn table<'a>(&mut self, t: &'a Table, key: &str, path: &str) -> Option<&'a Table> {
        match t.get(key)? {
            Value::Table(x) => Some(x),
            v => {
                self.err(&join(path, key), format!("expected a table, found {}", type_name(v)));
                None
            }
        }
    }

    fn num_value(&mut self, v: &Value, path: &str) -> Option<f64> {
        match v {
            Value::Float(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            v => {
                self.err(path, format!("expected a number, found {}", type_name(v)));
                None
            }
        }
    }

    fn num(&mut self, t: &Table, key: &str, path: &str) -> Option<f64> {
        let v = t.get(key)?;
        let x = self.num_value(v, &join(path, key))?;
        if !x.is_finite() {
            self.err(&join(path, key), "must be finite");
            return None;
        }
        Some(x)
    }

    fn num_or(&mut self, t: &Table, key: &str, path: &str, default: f64) -> f64 {
        self.num(t, key, path).unwrap_or(default)
    }

    fn uint(&mut self, t: &Table, key: &str, path: &str) -> Option<usize> {
        match t.get(key)? {
            Value::Integer(i) if *i >= 0 => Some(*i as usize),
            Value::Integer(i) => {
                self.err(&join(path, key), format!("must be nonnegative, got {i}"));
                None
            }
            v => {
                self.err(&join(path, key), format!("expected an integer, found {}", type_name(v)));
                None
            }
        }
    }

    fn uint_or(&mut self, t: &Table, key: &str, path: &str, default: usize) -> usize {
        self.uint(t, key, path).unwrap_or(default)
    }

    fn string<'a>(&mut self, t: &'a Table, key: &str, path: &str) -> Option<&'a str> {
        match t.get(key)? {
            Value::String(s) => Some(s),
            v => {
                self.err(&join(path, key), format!("expected a string, found {}", type_name(v)));
                None
            }
        }
    }

    fn boolean(&mut self, t: &Table, key: &str, path: &str, default: bool) -> bool {
        match t.get(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(v) => {
                self.err(&join(path, key), format!("expected a boolean, found {}", type_name(v)));
                default
            }
        }
    }

    fn nums(&mut self, v: &Value, path: &str) -> Option<Vec<f64>> {
        let Value::Array(a) = v else {
            self.err(path, format!("expected an array of numbers, found {}", type_name(v)));
            return None;
        };
        let out: Vec<Option<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, x)| self.num_value(x, &format!("{path}[{i}]")))
            .collect();
        out.into_iter().collect()
    }

    fn choice<T: Copy>(&mut self, t: &Table, key: &str, path: &str, options: &[(&str, T)], default: T) -> T {
        match self.string(t, key, path) {
            None => default,
            Some(s) => match options.iter().find(|(n, _)| *n == s) {
                Some((_, v)) => *v,
                None => {
                    let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                    self.err(&join(path, key), format!("unknown value \"{s}\" (expected one of: {})", names.join(", ")));
                    default
                }
            },
        }
    }

    /// A number (constant) or a table with `kind`.
    fn rule(&mut self, v: &Value, path: &str) -> Option<Rule> {
        let t = match v {
            Value::Float(_) | Value::Integer(_) => return self.num_value(v, path).map(Rule::Constant),
            Value::Table(t) => t,
            v => {
                self.err(path, format!("expected a number or a rule table, found {}", type_name(v)));
                return None;
            }
        };
        let kind = match self.string(t, "kind", path) {
            Some(k) => k,
            None => {
                if !t.contains_key("kind") {
                    self.err(&join(path, "kind"), "missing (constant, affine, call or tanh)");
                }
                return None;
            }
        };
        match kind {
            "constant" => {
                self.keys(t, path, &["kind", "value"]);
                match self.num(t, "value", path) {
                    Some(v) => Some(Rule::Constant(v)),
                    None => {
                        if !t.contains_key("value") {
                            self.err(&join(path, "value"), "missing");
                        }
                        None
                    }
                }
            }
            "affine" => {
                self.keys(t, path, &["kind", "a", "b", "c"]);
                Some(Rule::Affine {
                    a: self.num_or(t, "a", path, 0.0),
                    b: self.num_or(t, "b", path, 0.0),
                    c: self.num_or(t, "c", path, 0.0),
                })
            }
            "call" => {
                self.keys(t, path, &["kind", "strike", "scale", "shift"]);
                Some(Rule::Call {
                    strike: self.num_or(t, "strike", path, 0.0),
                    scale: self.num_or(t, "scale", path, 1.0),
                    shift: self.num_or(t, "shift", path, 0.0),
                })
            }
            "tanh" => {
                self.keys(t, path, &["kind", "a", "b"]);
                Some(Rule::Tanh {
                    a: self.num_or(t, "a", path, 0.0),
                    b: self.num_or(t, "b", path, 1.0),
                })
            }
            other => {
                self.err(&join(path, "kind"), format!("unknown rule kind \"{other}\" (expected constant, affine, call or tanh)"));
                None
            }
        }
    }

    fn rule_at(&mut self, t: &Table, key: &str, path: &str) -> Option<Rule> {
        let v = t.get(key)?;
        self.rule(v, &join(path, key))
    }
}

const TOP_KEYS: &[&str] = &[
    "run", "name", "seed", "beta", "model", "default", "driver", "terminal", "barriers", "game", "penalize",
    "links", "mc", "bs", "tolerances",
];

/// Parses and validates a scenario; `name` is the fallback output prefix.
pub fn parse_scenario(text: &str, name: &str) -> Result<Scenario, CliError> {
    let doc: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Parse(vec![format!("syntax: {}", e.message())]))?;
    let mut w = Walker { errors: Vec::new() };
    w.keys(&doc, "", TOP_KEYS);

    let run = match w.string(&doc, "run", "") {
        Some(s) => match RunKind::ALL.iter().find(|(n, _)| *n == s) {
            Some((_, k)) => Some(*k),
            None => {
                let names: Vec<&str> = RunKind::ALL.iter().map(|(n, _)| *n).collect();
                w.err("run", format!("unknown run kind \"{s}\" (expected one of: {})", names.join(", ")));
                None
            }
        },
        None => {
            if !doc.contains_key("run") {
                w.err("run", "missing");
            }
            None
        }
    };
    let name = w.string(&doc, "name", "").unwrap_or(name).to_string();
    let seed = match doc.get("seed") {
        None => 1,
        Some(Value::Integer(i)) => *i as u64,
        Some(v) => {
            w.err("seed", format!("expected an integer, found {}", type_name(v)));
            1
        }
    };
    let beta = w.num_or(&doc, "beta", "", 4.0);
    if beta < 0.0 {
        w.err("beta", format!("must be nonnegative, got {beta}"));
    }

    let empty = Table::new();
    let m = w.table(&doc, "model", "").unwrap_or(&empty);
    w.keys(m, "model", &["n_steps", "dt", "increment", "up_prob"]);
    let model = ModelSpec {
        n_steps: w.uint_or(m, "n_steps", "model", 2),
        dt: w.num_or(m, "dt", "model", 0.5),
        increment: w.num(m, "increment", "model"),
        up_prob: w.num(m, "up_prob", "model"),
    };

    let default = parse_default(&mut w, &doc, &empty);
    let driver = parse_driver(&mut w, &doc, &empty);
    let terminal = w.rule_at(&doc, "terminal", "").unwrap_or(Rule::Constant(0.0));

    let b = w.table(&doc, "barriers", "").unwrap_or(&empty);
    w.keys(b, "barriers", &["lower", "upper"]);
    let lower = w.rule_at(b, "lower", "barriers");
    let upper = w.rule_at(b, "upper", "barriers");

    let game = w.table(&doc, "game", "").map(|g| {
        w.keys(g, "game", &["q", "xi1", "xi2", "theta", "negative_control"]);
        let need = |w: &mut Walker, key: &str| {
            let r = w.rule_at(g, key, "game");
            if r.is_none() && !g.contains_key(key) {
                w.err(&join("game", key), "missing");
            }
            r.unwrap_or(Rule::Constant(0.0))
        };
        GameForm {
            q: need(&mut w, "q"),
            xi1: need(&mut w, "xi1"),
            xi2: need(&mut w, "xi2"),
            theta: w.uint_or(g, "theta", "game", 0),
            negative_control: w.boolean(g, "negative_control", "game", true),
        }
    });
    if let Some(k) = run {
        if k.needs_game() && game.is_none() {
            w.err("game", format!("required by run kind {k}"));
        }
    }

    let p = w.table(&doc, "penalize", "").unwrap_or(&empty);
    w.keys(p, "penalize", &["levels", "mode"]);
    let levels = p
        .get("levels")
        .and_then(|v| w.nums(v, "penalize.levels"))
        .unwrap_or_else(|| vec![1.0, 10.0, 1e2, 1e3, 1e4]);
    if levels.is_empty() || levels.iter().any(|x| !(*x > 0.0)) {
        w.err("penalize.levels", "need at least one positive level");
    }
    let penalize = PenalizeSpec {
        levels,
        mode: w.choice(
            p,
            "mode",
            "penalize",
            &[("lower", PenaltyModeSpec::Lower), ("upper", PenaltyModeSpec::Upper), ("double", PenaltyModeSpec::Double)],
            PenaltyModeSpec::Double,
        ),
    };

    let l = w.table(&doc, "links", "").unwrap_or(&empty);
    w.keys(l, "links", &["levels"]);
    let link_levels = match l.get("levels") {
        None => vec![2, 4, 8, 16],
        Some(v) => w
            .nums(v, "links.levels")
            .map(|xs| xs.iter().map(|x| *x as usize).collect())
            .unwrap_or_default(),
    };
    if link_levels.iter().any(|n| *n == 0 || *n > 18) {
        w.err("links.levels", "levels must lie in 1..=18");
    }

    let mc = parse_mc(&mut w, &doc, &empty);
    let bs = parse_bs(&mut w, &doc, &empty);
    let tol = parse_tol(&mut w, &doc, &empty);

    if !w.errors.is_empty() {
        return Err(CliError::Parse(w.errors));
    }
    Ok(Scenario {
        name,
        run: run.expect("run is present when no errors were recorded"),
        seed,
        beta,
        model,
        default,
        driver,
        terminal,
        lower,
        upper,
        game,
        penalize,
        links: LinksSpec { levels: link_levels },
        mc,
        bs,
        tol,
    })
}

fn parse_default(w: &mut Walker, doc: &Table, empty: &Table) -> DefaultSpec {
    let d = w.table(doc, "default", "").unwrap_or(empty);
    let kind = w.choice(
        d,
        "kind",
        "default",
        &[
            ("none", 0),
            ("deterministic", 1),
            ("hazard", 2),
            ("hazard_of_path", 2),
            ("table", 3),
            ("cox", 4),
        ],
        0,
    );
    match kind {
        1 => {
            w.keys(d, "default", &["kind", "h"]);
            let h = d.get("h").and_then(|v| w.nums(v, "default.h"));
            if h.is_none() && !d.contains_key("h") {
                w.err("default.h", "missing (masses h_1..h_N)");
            }
            DefaultSpec::Deterministic(h.unwrap_or_default())
        }
        2 => {
            w.keys(d, "default", &["kind", "base", "slope", "observe", "max_prob"]);
            DefaultSpec::Hazard {
                base: w.num_or(d, "base", "default", 0.5),
                slope: w.num_or(d, "slope", "default", 0.0),
                observe: w.choice(d, "observe", "default", &[("current", Observe::Current), ("terminal", Observe::Terminal)], Observe::Current),
                max_prob: w.num_or(d, "max_prob", "default", 0.9),
            }
        }
        3 => {
            w.keys(d, "default", &["kind", "rows"]);
            let rows = match d.get("rows") {
                Some(Value::Array(a)) => a
                    .iter()
                    .enumerate()
                    .filter_map(|(i, r)| w.nums(r, &format!("default.rows[{i}]")))
                    .collect(),
                Some(v) => {
                    w.err("default.rows", format!("expected an array of rows, found {}", type_name(v)));
                    Vec::new()
                }
                None => {
                    w.err("default.rows", "missing (one row [h_1..h_N, h_inf] per path)");
                    Vec::new()
                }
            };
            DefaultSpec::Table(rows)
        }
        4 => {
            w.keys(d, "default", &["kind", "intensity"]);
            let r = w.rule_at(d, "intensity", "default");
            if r.is_none() && !d.contains_key("intensity") {
                w.err("default.intensity", "missing");
            }
            DefaultSpec::Cox(r.unwrap_or(Rule::Constant(0.0)))
        }
        _ => {
            w.keys(d, "default", &["kind"]);
            DefaultSpec::None
        }
    }
}

fn parse_driver(w: &mut Walker, doc: &Table, empty: &Table) -> DriverForm {
    let d = w.table(doc, "driver", "").unwrap_or(empty);
    match w.choice(d, "kind", "driver", &[("zero", 0), ("generator", 1), ("linear", 2)], 0) {
        1 => {
            w.keys(d, "driver", &["kind", "g"]);
            let g = w.rule_at(d, "g", "driver");
            if g.is_none() && !d.contains_key("g") {
                w.err("driver.g", "missing");
            }
            DriverForm::Generator(g.unwrap_or(Rule::Constant(0.0)))
        }
        2 => {
            w.keys(d, "driver", &["kind", "r", "theta", "g"]);
            DriverForm::Linear {
                r: w.num_or(d, "r", "driver", 0.0),
                theta: w.num_or(d, "theta", "driver", 0.0),
                g: w.rule_at(d, "g", "driver"),
            }
        }
        _ => {
            w.keys(d, "driver", &["kind"]);
            DriverForm::Zero
        }
    }
}

fn parse_mc(w: &mut Walker, doc: &Table, empty: &Table) -> McSpec {
    let m = w.table(doc, "mc", "").unwrap_or(empty);
    w.keys(
        m,
        "mc",
        &["paths", "increments", "enumerate", "basis", "degree", "bins", "ridge", "treatment", "bootstrap", "compare_tree"],
    );
    let basis_kind = w.choice(m, "basis", "mc", &[("polynomial", 0), ("piecewise", 1), ("saturated", 2)], 0);
    let basis = match basis_kind {
        1 => BasisSpec::Piecewise(w.uint_or(m, "bins", "mc", 16)),
        2 => BasisSpec::Saturated,
        _ => BasisSpec::Polynomial(w.uint_or(m, "degree", "mc", 3)),
    };
    let paths = w.uint_or(m, "paths", "mc", 10_000);
    if paths == 0 {
        w.err("mc.paths", "must be at least 1");
    }
    let ridge = w.num_or(m, "ridge", "mc", 1e-8);
    if ridge < 0.0 {
        w.err("mc.ridge", "must be nonnegative");
    }
    McSpec {
        paths,
        increments: w.choice(
            m,
            "increments",
            "mc",
            &[("gaussian", IncrementSpec::Gaussian), ("two-point", IncrementSpec::TwoPoint)],
            IncrementSpec::Gaussian,
        ),
        enumerate: w.boolean(m, "enumerate", "mc", false),
        basis,
        ridge,
        integrated: w.choice(m, "treatment", "mc", &[("sampled", false), ("integrated", true)], false),
        bootstrap: w.uint_or(m, "bootstrap", "mc", 0),
        compare_tree: w.boolean(m, "compare_tree", "mc", false),
    }
}

fn parse_bs(w: &mut Walker, doc: &Table, empty: &Table) -> BsSpec {
    let b = w.table(doc, "bs", "").unwrap_or(empty);
    w.keys(
        b,
        "bs",
        &[
            "r", "mu", "sigma", "sigma_late", "sigma_min", "s0", "strike", "horizon", "steps", "paths", "intensity",
            "recovery", "degree",
        ],
    );
    let spec = BsSpec {
        r: w.num_or(b, "r", "bs", 0.05),
        mu: w.num_or(b, "mu", "bs", 0.05),
        sigma: w.num_or(b, "sigma", "bs", 0.2),
        sigma_late: w.num(b, "sigma_late", "bs"),
        sigma_min: w.num_or(b, "sigma_min", "bs", 1e-3),
        s0: w.num_or(b, "s0", "bs", 100.0),
        strike: w.num_or(b, "strike", "bs", 100.0),
        horizon: w.num_or(b, "horizon", "bs", 1.0),
        steps: w.uint_or(b, "steps", "bs", 20),
        paths: w.uint_or(b, "paths", "bs", 100_000),
        intensity: w.num_or(b, "intensity", "bs", 0.0),
        recovery: w.num_or(b, "recovery", "bs", 0.0),
        degree: w.uint_or(b, "degree", "bs", 3),
    };
    if spec.intensity < 0.0 {
        w.err("bs.intensity", "must be nonnegative");
    }
    spec
}

fn parse_tol(w: &mut Walker, doc: &Table, empty: &Table) -> Tolerances {
    let t = w.table(doc, "tolerances", "").unwrap_or(empty);
    w.keys(
        t,
        "tolerances",
        &["skorokhod", "balance", "penalty", "link", "link_final", "link_slack", "game", "saddle", "std_errors", "tree"],
    );
    let d = Tolerances::default();
    let tol = Tolerances {
        skorokhod: w.num_or(t, "skorokhod", "tolerances", d.skorokhod),
        balance: w.num_or(t, "balance", "tolerances", d.balance),
        penalty: w.num_or(t, "penalty", "tolerances", d.penalty),
        link: w.num_or(t, "link", "tolerances", d.link),
        link_final: w.num_or(t, "link_final", "tolerances", d.link_final),
        link_slack: w.num_or(t, "link_slack", "tolerances", d.link_slack),
        game: w.num_or(t, "game", "tolerances", d.game),
        saddle: w.num_or(t, "saddle", "tolerances", d.saddle),
        std_errors: w.num_or(t, "std_errors", "tolerances", d.std_errors),
        tree: w.num_or(t, "tree", "tolerances", d.tree),
    };
    for (k, v) in [
        ("skorokhod", tol.skorokhod),
        ("balance", tol.balance),
        ("penalty", tol.penalty),
        ("link", tol.link),
        ("game", tol.game),
        ("saddle", tol.saddle),
        ("std_errors", tol.std_errors),
        ("tree", tol.tree),
    ] {
        if v < 0.0 {
            w.err(&join("tolerances", k), "must be nonnegative");
        }
    }
    tol
}

/// Replaces the value at a dotted path, keeping integers integral when the
/// new text parses as one.
pub fn set_param(text: &str, path: &str, value: &str) -> Result<String, CliError> {
    let mut doc: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Parse(vec![format!("syntax: {}", e.message())]))?;
    let parts: Vec<&str> = path.split('.').collect();
    let (last, parents) = parts.split_last().ok_or_else(|| CliError::Usage("empty parameter name".into()))?;
    let mut cur = &mut doc;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Usage(format!("{path}: {p} is not a table"))),
        };
    }
    let v = if let Ok(i) = value.parse::<i64>() {
        Value::Integer(i)
    } else if let Ok(x) = value.parse::<f64>() {
        Value::Float(x)
    } else if let Ok(b) = value.parse::<bool>() {
        Value::Boolean(b)
    } else {
        Value::String(value.to_string())
    };
    cur.insert(last.to_string(), v);
    Ok(toml::to_string(&doc).map_err(|e| CliError::Usage(e.to_string()))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario_uses_defaults() {
        let s = parse_scenario("run = \"tree-solve\"", "min").unwrap();
        assert_eq!(s.model.n_steps, 2);
        assert_eq!(s.driver, DriverForm::Zero);
        assert_eq!(s.name, "min");
    }

    #[test]
    fn all_errors_are_reported_with_paths() {
        let text = r#"
            run = "tree-solv"
            colour = 3
            [model]
            n_steps = "four"
            [barriers]
            lower = { kind = "wave" }
        "#;
        let CliError::Parse(errs) = parse_scenario(text, "x").unwrap_err() else {
            panic!()
        };
        let joined = errs.join("\n");
        for needle in ["run: unknown run kind", "colour: unknown key", "model.n_steps: expected an integer", "barriers.lower.kind: unknown rule kind"] {
            assert!(joined.contains(needle), "{joined}");
        }
    }

    #[test]
    fn game_runs_require_a_game_table() {
        let err = parse_scenario("run = \"dynkin-oracle\"", "g").unwrap_err();
        assert!(err.to_string().contains("game: required"));
    }

    #[test]
    fn sweep_parameter_is_rewritten() {
        let out = set_param("run = \"tree-solve\"\n[model]\nn_steps = 2\n", "model.n_steps", "5").unwrap();
        assert_eq!(parse_scenario(&out, "s").unwrap().model.n_steps, 5);
    }
}
