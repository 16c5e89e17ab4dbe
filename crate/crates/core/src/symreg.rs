//! Genetic-programming symbolic regression over named features, Pareto
//! fronts of accuracy against complexity, and law selection.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::DatasetSplit;
use crate::error::{Error, Result};
use crate::probes::Predictions;
use crate::stats;

/// Denominators below this magnitude make a division return the sentinel.
pub const DIV_EPS: f64 = 1e-9;
/// Value returned by protected operations.
pub const SENTINEL: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnaryOp {
    Sin,
    Cos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    const ALL: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div];

    fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Const(f64),
    Var(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn var(name: &str) -> Self {
        Expr::Var(name.to_string())
    }

    pub fn bin(op: BinaryOp, a: Expr, b: Expr) -> Self {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    /// Node count.
    pub fn complexity(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Unary(_, a) => 1 + a.complexity(),
            Expr::Binary(_, a, b) => 1 + a.complexity() + b.complexity(),
        }
    }

    fn depth(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Unary(_, a) => 1 + a.depth(),
            Expr::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    /// Pre-order node at `idx`.
    fn node(&self, idx: usize) -> &Expr {
        fn go<'a>(e: &'a Expr, idx: &mut usize) -> Option<&'a Expr> {
            if *idx == 0 {
                return Some(e);
            }
            *idx -= 1;
            match e {
                Expr::Const(_) | Expr::Var(_) => None,
                Expr::Unary(_, a) => go(a, idx),
                Expr::Binary(_, a, b) => go(a, idx).or_else(|| go(b, idx)),
            }
        }
        let mut i = idx;
        go(self, &mut i).expect("node index in range")
    }

    fn node_mut(&mut self, idx: usize) -> &mut Expr {
        fn go<'a>(e: &'a mut Expr, idx: &mut usize) -> Option<&'a mut Expr> {
            if *idx == 0 {
                return Some(e);
            }
            *idx -= 1;
            match e {
                Expr::Const(_) | Expr::Var(_) => None,
                Expr::Unary(_, a) => go(a, idx),
                Expr::Binary(_, a, b) => {
                    let n = a.complexity();
                    if *idx < n {
                        go(a, idx)
                    } else {
                        *idx -= n;
                        go(b, idx)
                    }
                }
            }
        }
        let mut i = idx;
        go(self, &mut i).expect("node index in range")
    }

    fn constants_mut(&mut self) -> Vec<&mut f64> {
        let mut out = Vec::new();
        fn go<'a>(e: &'a mut Expr, out: &mut Vec<&'a mut f64>) {
            match e {
                Expr::Const(c) => out.push(c),
                Expr::Var(_) => {}
                Expr::Unary(_, a) => go(a, out),
                Expr::Binary(_, a, b) => {
                    go(a, out);
                    go(b, out);
                }
            }
        }
        go(self, &mut out);
        out
    }

    pub fn variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        fn go(e: &Expr, out: &mut Vec<String>) {
            match e {
                Expr::Const(_) => {}
                Expr::Var(v) => {
                    if !out.contains(v) {
                        out.push(v.clone());
                    }
                }
                Expr::Unary(_, a) => go(a, out),
                Expr::Binary(_, a, b) => {
                    go(a, out);
                    go(b, out);
                }
            }
        }
        go(self, &mut out);
        out
    }

    /// Scalar evaluation; the flag is set when a protected operation fired.
    pub fn eval_point(&self, vars: &BTreeMap<String, f64>) -> Result<(f64, bool)> {
        let (v, f) = match self {
            Expr::Const(c) => (*c, false),
            Expr::Var(n) => (*vars.get(n).ok_or_else(|| Error::UnboundVariable(n.clone()))?, false),
            Expr::Unary(op, a) => {
                let (x, f) = a.eval_point(vars)?;
                (apply_unary(*op, x), f)
            }
            Expr::Binary(op, a, b) => {
                let (x, fa) = a.eval_point(vars)?;
                let (y, fb) = b.eval_point(vars)?;
                let (v, f) = apply_binary(*op, x, y);
                (v, fa || fb || f)
            }
        };
        Ok(if v.is_finite() { (v, f) } else { (SENTINEL, true) })
    }
}

fn apply_unary(op: UnaryOp, x: f64) -> f64 {
    match op {
        UnaryOp::Sin => x.sin(),
        UnaryOp::Cos => x.cos(),
    }
}

fn apply_binary(op: BinaryOp, x: f64, y: f64) -> (f64, bool) {
    match op {
        BinaryOp::Add => (x + y, false),
        BinaryOp::Sub => (x - y, false),
        BinaryOp::Mul => (x * y, false),
        BinaryOp::Div if y.abs() < DIV_EPS => (SENTINEL, true),
        BinaryOp::Div => (x / y, false),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{}", format_const(*c)),
            Expr::Var(v) => f.write_str(v),
            Expr::Unary(UnaryOp::Sin, a) => write!(f, "sin({a})"),
            Expr::Unary(UnaryOp::Cos, a) => write!(f, "cos({a})"),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
        }
    }
}

fn format_const(c: f64) -> String {
    let s = format!("{c:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

/// Feature matrix with named columns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Features {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Shape(format!("{} names for {} columns", names.len(), columns.len())));
        }
        if let Some(n) = columns.first().map(Vec::len) {
            if columns.iter().any(|c| c.len() != n) {
                return Err(Error::Shape("feature columns differ in length".into()));
            }
        }
        Ok(Self { names, columns })
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub values: Vec<f64>,
    /// Rows where a protected operation returned the sentinel.
    pub flags: Vec<bool>,
}

impl Evaluation {
    pub fn any_flagged(&self) -> bool {
        self.flags.iter().any(|&f| f)
    }
}

/// Evaluates an expression on every row of the feature matrix.
pub fn eval_expr(expr: &Expr, features: &Features) -> Result<Evaluation> {
    let n = features.rows();
    let mut flags = vec![false; n];
    let mut values = eval_rec(expr, features, n, &mut flags)?;
    for (v, f) in values.iter_mut().zip(flags.iter_mut()) {
        if !v.is_finite() {
            *v = SENTINEL;
            *f = true;
        }
    }
    Ok(Evaluation { values, flags })
}

fn eval_rec(expr: &Expr, features: &Features, n: usize, flags: &mut [bool]) -> Result<Vec<f64>> {
    Ok(match expr {
        Expr::Const(c) => vec![*c; n],
        Expr::Var(name) => features.column(name).ok_or_else(|| Error::UnboundVariable(name.clone()))?.to_vec(),
        Expr::Unary(op, a) => {
            let mut v = eval_rec(a, features, n, flags)?;
            v.iter_mut().for_each(|x| *x = apply_unary(*op, *x));
            v
        }
        Expr::Binary(op, a, b) => {
            let mut x = eval_rec(a, features, n, flags)?;
            let y = eval_rec(b, features, n, flags)?;
            for i in 0..n {
                let (v, f) = apply_binary(*op, x[i], y[i]);
                x[i] = v;
                flags[i] |= f;
            }
            x
        }
    })
}

/// Mean squared error, or `None` when any row was flagged or non-finite.
pub fn mse(expr: &Expr, features: &Features, y: &[f64]) -> Result<Option<f64>> {
    let ev = eval_expr(expr, features)?;
    if ev.any_flagged() {
        return Ok(None);
    }
    let m = ev.values.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64;
    Ok(m.is_finite().then_some(m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    pub population: usize,
    pub generations: usize,
    pub max_complexity: usize,
    pub tournament: usize,
    pub crossover_rate: f64,
    pub subtree_mutation_rate: f64,
    pub point_mutation_rate: f64,
    pub hoist_rate: f64,
    /// Remaining probability goes to constant perturbation.
    pub init_depth: usize,
    pub elites: usize,
    /// Hill-climbing passes over the constants of the best individuals.
    pub constant_polish: usize,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            population: 512,
            generations: 60,
            max_complexity: 25,
            tournament: 5,
            crossover_rate: 0.5,
            subtree_mutation_rate: 0.15,
            point_mutation_rate: 0.15,
            hoist_rate: 0.05,
            init_depth: 4,
            elites: 8,
            constant_polish: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontEntry {
    pub complexity: usize,
    pub mse: f64,
    /// Selection score against the previous entry; `None` for the first.
    pub score: Option<f64>,
    pub expr: Expr,
    pub expression: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub target: String,
    pub inputs: Vec<String>,
    /// Ordered by complexity; MSE strictly decreases.
    pub entries: Vec<FrontEntry>,
}

struct Search<'a> {
    features: &'a Features,
    y: &'a [f64],
    cfg: &'a GpConfig,
}

#[derive(Clone)]
struct Individual {
    expr: Expr,
    fitness: f64,
    complexity: usize,
}

impl Search<'_> {
    fn fitness(&self, e: &Expr) -> f64 {
        match mse(e, self.features, self.y) {
            Ok(Some(m)) => m,
            _ => f64::INFINITY,
        }
    }

    fn individual(&self, expr: Expr) -> Individual {
        let complexity = expr.complexity();
        let fitness = if complexity > self.cfg.max_complexity { f64::INFINITY } else { self.fitness(&expr) };
        Individual { expr, fitness, complexity }
    }

    fn terminal(&self, rng: &mut ChaCha8Rng) -> Expr {
        if self.features.names.is_empty() || rng.random_bool(0.3) {
            Expr::Const(random_constant(rng))
        } else {
            Expr::Var(self.features.names[rng.random_range(0..self.features.names.len())].clone())
        }
    }

    fn random_tree(&self, rng: &mut ChaCha8Rng, depth: usize, full: bool) -> Expr {
        if depth <= 1 || (!full && rng.random_bool(0.3)) {
            return self.terminal(rng);
        }
        if rng.random_bool(0.15) {
            let op = if rng.random_bool(0.5) { UnaryOp::Sin } else { UnaryOp::Cos };
            Expr::Unary(op, Box::new(self.random_tree(rng, depth - 1, full)))
        } else {
            let op = BinaryOp::ALL[rng.random_range(0..4)];
            Expr::bin(op, self.random_tree(rng, depth - 1, full), self.random_tree(rng, depth - 1, full))
        }
    }

    fn tournament<'p>(&self, pop: &'p [Individual], rng: &mut ChaCha8Rng) -> &'p Individual {
        let mut best = &pop[rng.random_range(0..pop.len())];
        for _ in 1..self.cfg.tournament {
            let c = &pop[rng.random_range(0..pop.len())];
            if better(c, best) {
                best = c;
            }
        }
        best
    }

    fn offspring(&self, pop: &[Individual], rng: &mut ChaCha8Rng) -> Expr {
        let parent = self.tournament(pop, rng).expr.clone();
        let c = &self.cfg;
        let u: f64 = rng.random();
        let mut child = parent;
        let n = child.complexity();
        if u < c.crossover_rate {
            let donor = &self.tournament(pop, rng).expr;
            let piece = donor.node(rng.random_range(0..donor.complexity())).clone();
            *child.node_mut(rng.random_range(0..n)) = piece;
        } else if u < c.crossover_rate + c.subtree_mutation_rate {
            let depth = rng.random_range(1..=3);
            *child.node_mut(rng.random_range(0..n)) = self.random_tree(rng, depth, false);
        } else if u < c.crossover_rate + c.subtree_mutation_rate + c.point_mutation_rate {
            let node = child.node_mut(rng.random_range(0..n));
            match node {
                Expr::Const(_) | Expr::Var(_) => *node = self.terminal(rng),
                Expr::Unary(op, _) => *op = if *op == UnaryOp::Sin { UnaryOp::Cos } else { UnaryOp::Sin },
                Expr::Binary(op, _, _) => *op = BinaryOp::ALL[rng.random_range(0..4)],
            }
        } else if u < c.crossover_rate + c.subtree_mutation_rate + c.point_mutation_rate + c.hoist_rate {
            child = child.node(rng.random_range(0..n)).clone();
        } else {
            // log-normal scaling; an occasional sign flip lets constants cross zero
            for k in child.constants_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *k *= (0.2 * z).exp();
                if rng.random_bool(0.05) {
                    *k = -*k;
                }
                if *k == 0.0 {
                    *k = random_constant(rng);
                }
            }
        }
        child
    }

    /// Coordinate search on the constants; never makes the fit worse.
    fn polish(&self, ind: &Individual) -> Individual {
        let mut best = ind.clone();
        let nconst = best.expr.clone().constants_mut().len();
        if nconst == 0 || !best.fitness.is_finite() {
            return best;
        }
        let mut steps = vec![0.1f64; nconst];
        for _ in 0..self.cfg.constant_polish {
            for (j, step) in steps.iter_mut().enumerate() {
                let mut improved = false;
                for sign in [1.0, -1.0] {
                    let mut cand = best.expr.clone();
                    {
                        let mut ks = cand.constants_mut();
                        *ks[j] += sign * *step * ks[j].abs().max(1e-3);
                    }
                    let f = self.fitness(&cand);
                    if f < best.fitness {
                        best = Individual { expr: cand, fitness: f, complexity: best.complexity };
                        improved = true;
                        break;
                    }
                }
                *step = if improved { (*step * 2.0).min(1.0) } else { *step * 0.5 };
            }
        }
        best
    }
}

fn better(a: &Individual, b: &Individual) -> bool {
    a.fitness < b.fitness || (a.fitness == b.fitness && a.complexity < b.complexity)
}

fn random_constant(rng: &mut ChaCha8Rng) -> f64 {
    let c: f64 = rng.random_range(-2.0..2.0);
    (c * 1000.0).round() / 1000.0
}

/// Independent stream for one individual of one generation.
fn stream(seed: u64, generation: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((generation as u64) << 32) | index as u64);
    rng
}

fn hall_of_fame_insert(hof: &mut BTreeMap<usize, Individual>, ind: &Individual) {
    if !ind.fitness.is_finite() {
        return;
    }
    match hof.get(&ind.complexity) {
        Some(h) if h.fitness <= ind.fitness => {}
        _ => {
            hof.insert(ind.complexity, ind.clone());
        }
    }
}

/// Runs the GP search and returns the Pareto front of MSE against
/// complexity.
pub fn symbolic_fit(features: &Features, y: &[f64], target: &str, cfg: &GpConfig) -> Result<ParetoFront> {
    let n = features.rows();
    if n == 0 || y.is_empty() {
        return Err(Error::InvalidInput("no rows to fit".into()));
    }
    if n != y.len() {
        return Err(Error::Shape(format!("{n} feature rows for {} targets", y.len())));
    }
    if cfg.population < 2 || cfg.tournament == 0 || cfg.max_complexity == 0 {
        return Err(Error::InvalidArgument("population ≥ 2, tournament ≥ 1 and max_complexity ≥ 1 required".into()));
    }
    let search = Search { features, y, cfg };
    let mut hof: BTreeMap<usize, Individual> = BTreeMap::new();

    let mut pop: Vec<Individual> = Vec::with_capacity(cfg.population);
    pop.push(search.individual(Expr::Const(stats::mean(y))));
    for name in &features.names {
        pop.push(search.individual(Expr::Var(name.clone())));
    }
    let mut i = pop.len();
    while pop.len() < cfg.population {
        let mut rng = stream(cfg.seed, 0, i);
        let depth = 2 + i % cfg.init_depth.max(1);
        let expr = search.random_tree(&mut rng, depth, i % 2 == 0);
        pop.push(search.individual(expr));
        i += 1;
    }

    for generation in 1..=cfg.generations {
        pop.iter().for_each(|ind| hall_of_fame_insert(&mut hof, ind));
        let mut ranked: Vec<usize> = (0..pop.len()).collect();
        ranked.sort_by(|&a, &b| pop[a].fitness.total_cmp(&pop[b].fitness).then(pop[a].complexity.cmp(&pop[b].complexity)));
        let mut next: Vec<Individual> = ranked.iter().take(cfg.elites).map(|&k| search.polish(&pop[k])).collect();
        for h in hof.values() {
            if next.len() >= cfg.elites * 2 {
                break;
            }
            next.push(h.clone());
        }
        let mut idx = 0;
        while next.len() < cfg.population {
            let mut rng = stream(cfg.seed, generation, idx);
            let child = search.offspring(&pop, &mut rng);
            idx += 1;
            if child.complexity() > cfg.max_complexity || child.depth() > 12 {
                continue;
            }
            next.push(search.individual(child));
        }
        pop = next;
    }
    pop.iter().for_each(|ind| hall_of_fame_insert(&mut hof, ind));
    let polished: Vec<Individual> = hof.values().map(|h| search.polish(h)).collect();
    polished.iter().for_each(|ind| hall_of_fame_insert(&mut hof, ind));

    let mut entries: Vec<FrontEntry> = Vec::new();
    for (c, ind) in hof {
        if entries.last().is_none_or(|e| ind.fitness < e.mse) {
            let score = entries.last().map(|p| score(p, c, ind.fitness));
            entries.push(FrontEntry { complexity: c, mse: ind.fitness, score, expression: ind.expr.to_string(), expr: ind.expr });
        }
    }
    Ok(ParetoFront { target: target.to_string(), inputs: features.names.clone(), entries })
}

fn score(prev: &FrontEntry, complexity: usize, mse: f64) -> f64 {
    let ln = |l: f64| l.max(f64::MIN_POSITIVE).ln();
    (ln(prev.mse) - ln(mse)) / (complexity - prev.complexity) as f64
}

/// Score-based selection: the entry with the largest drop in log loss per
/// unit of added complexity relative to its predecessor on the front.
pub fn select_best(front: &ParetoFront) -> Result<&FrontEntry> {
    let e = &front.entries;
    match e.len() {
        0 => Err(Error::InvalidInput("empty Pareto front".into())),
        1 => Ok(&e[0]),
        _ => {
            let mut best = 1;
            let mut best_score = f64::NEG_INFINITY;
            for i in 1..e.len() {
                let score = score(&e[i - 1], e[i].complexity, e[i].mse);
                if score > best_score {
                    best_score = score;
                    best = i;
                }
            }
            Ok(&e[best])
        }
    }
}

/// Slope of log|f| against log r over a grid, other inputs held fixed.
/// `None` when the law is non-positive or flagged anywhere on the grid.
pub fn power_law_slope(expr: &Expr, var: &str, range: (f64, f64), points: usize, fixed: &BTreeMap<String, f64>) -> Result<Option<f64>> {
    if points < 2 || !(range.0 > 0.0 && range.1 > range.0) {
        return Err(Error::InvalidArgument("slope grid needs ≥ 2 points on a positive range".into()));
    }
    let mut lx = Vec::with_capacity(points);
    let mut ly = Vec::with_capacity(points);
    let mut vars = fixed.clone();
    for i in 0..points {
        let r = range.0 * (range.1 / range.0).powf(i as f64 / (points - 1) as f64);
        vars.insert(var.to_string(), r);
        let (v, flagged) = expr.eval_point(&vars)?;
        if flagged || v <= 0.0 {
            return Ok(None);
        }
        lx.push(r.ln());
        ly.push(v.ln());
    }
    Ok(stats::ols_slope(&lx, &ly))
}

/// Named inputs for every prediction row: `r` at the predicted step (one
/// past the window) plus the trajectory's `m1`, `m2`, `G`.
pub fn law_features(data: &DatasetSplit, pred: &Predictions, names: &[&str]) -> Result<Features> {
    let by_id: BTreeMap<usize, &crate::dynamics::Trajectory> = data.trajectories.iter().map(|t| (t.id, t)).collect();
    let mut columns = vec![Vec::with_capacity(pred.provenance.len()); names.len()];
    for p in &pred.provenance {
        let t = by_id
            .get(&p.trajectory)
            .ok_or_else(|| Error::InvalidInput(format!("trajectory {} not in split", p.trajectory)))?;
        let s = t.states.row(p.step + 1);
        for (col, &name) in columns.iter_mut().zip(names) {
            let v = match name {
                "r" => s[..t.spec.obs_dim()].iter().map(|x| x * x).sum::<f64>().sqrt(),
                other => t.param(other).ok_or_else(|| Error::UnboundVariable(other.to_string()))?,
            };
            col.push(v);
        }
    }
    Features::new(names.iter().map(|s| s.to_string()).collect(), columns)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawValidation {
    pub expression: String,
    pub per_set: Vec<(String, Option<f64>)>,
    pub rho_mean: f64,
    pub rho_std: f64,
}

/// Zero-shot check: Pearson ρ between the law and the true target on every
/// set, using the law's inputs at each window's next step.
pub fn validate_law(expr: &Expr, suite: &[DatasetSplit], target: &str, window: usize) -> Result<LawValidation> {
    let vars = expr.variables();
    let names: Vec<&str> = vars.iter().map(String::as_str).collect();
    let mut per_set = Vec::new();
    for split in suite {
        let mut prov = Vec::new();
        let mut truth = Vec::new();
        for t in &split.trajectories {
            let series = t.target(target)?;
            for step in window..t.len() {
                prov.push(crate::worldmodel::Provenance { trajectory: t.id, step: step - 1 });
                let row = series.row(step);
                truth.push(if row.len() == 1 { row[0] } else { row.iter().map(|v| v * v).sum::<f64>().sqrt() });
            }
        }
        let pred = Predictions { values: nalgebra::DMatrix::zeros(prov.len(), 1), provenance: prov };
        let feats = law_features(split, &pred, &names)?;
        let ev = eval_expr(expr, &feats)?;
        per_set.push((split.name.clone(), stats::pearson(&ev.values, &truth)));
    }
    let rhos: Vec<f64> = per_set.iter().map(|(_, r)| r.unwrap_or(0.0)).collect();
    Ok(LawValidation { expression: expr.to_string(), per_set, rho_mean: stats::mean(&rhos), rho_std: stats::std_dev(&rhos) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(names: &[&str], cols: Vec<Vec<f64>>) -> Features {
        Features::new(names.iter().map(|s| s.to_string()).collect(), cols).unwrap()
    }

    fn small() -> GpConfig {
        GpConfig { population: 256, generations: 30, ..GpConfig::default() }
    }

    #[test]
    fn eval_and_display() {
        let e = Expr::bin(BinaryOp::Div, Expr::var("m2"), Expr::bin(BinaryOp::Mul, Expr::var("r"), Expr::var("r")));
        assert_eq!(e.complexity(), 5);
        assert_eq!(e.to_string(), "(m2 / (r * r))");
        let f = feats(&["r", "m2"], vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(eval_expr(&e, &f).unwrap().values, vec![3.0, 1.0]);
        assert!(matches!(eval_expr(&Expr::var("q"), &f), Err(Error::UnboundVariable(_))));
    }

    /// Independent interpreter over a row given as a name → value map.
    fn oracle(e: &Expr, row: &BTreeMap<&str, f64>) -> f64 {
        match e {
            Expr::Const(c) => *c,
            Expr::Var(v) => row[v.as_str()],
            Expr::Unary(UnaryOp::Sin, a) => oracle(a, row).sin(),
            Expr::Unary(UnaryOp::Cos, a) => oracle(a, row).cos(),
            Expr::Binary(op, a, b) => {
                let (x, y) = (oracle(a, row), oracle(b, row));
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            }
        }
    }

    #[test]
    fn nested_expression_matches_oracle() {
        use rand::SeedableRng;
        // ((x1 * sin(x2)) - (cos((x1 / 0.5)) + x2))
        let e = Expr::bin(
            BinaryOp::Sub,
            Expr::bin(BinaryOp::Mul, Expr::var("x1"), Expr::Unary(UnaryOp::Sin, Box::new(Expr::var("x2")))),
            Expr::bin(
                BinaryOp::Add,
                Expr::Unary(UnaryOp::Cos, Box::new(Expr::bin(BinaryOp::Div, Expr::var("x1"), Expr::Const(0.5)))),
                Expr::var("x2"),
            ),
        );
        assert_eq!(e.depth(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x1: Vec<f64> = (0..100).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x2: Vec<f64> = (0..100).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f = feats(&["x1", "x2"], vec![x1.clone(), x2.clone()]);
        let ev = eval_expr(&e, &f).unwrap();
        for i in 0..100 {
            let row = BTreeMap::from([("x1", x1[i]), ("x2", x2[i])]);
            assert_eq!(ev.values[i], oracle(&e, &row));
        }
        assert_eq!(eval_expr(&Expr::var("x2"), &f).unwrap().values, x2);
    }

    #[test]
    fn protected_division_flags() {
        let e = Expr::bin(BinaryOp::Div, Expr::Const(1.0), Expr::var("x"));
        let f = feats(&["x"], vec![vec![0.0, 2.0]]);
        let ev = eval_expr(&e, &f).unwrap();
        assert_eq!(ev.values, vec![SENTINEL, 0.5]);
        assert_eq!(ev.flags, vec![true, false]);
        assert_eq!(mse(&e, &f, &[0.0, 0.5]).unwrap(), None);
    }

    #[test]
    fn recovers_sum_exactly() {
        let x1: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let x2: Vec<f64> = (0..50).map(|i| (i as f64 * 0.11).cos() * 2.0).collect();
        let y: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let f = feats(&["x1", "x2"], vec![x1, x2]);
        let front = symbolic_fit(&f, &y, "y", &small()).unwrap();
        let best = select_best(&front).unwrap();
        assert_eq!(best.complexity, 3, "{}", best.expression);
        assert_eq!(best.mse, 0.0);
    }

    #[test]
    fn constant_target() {
        let f = feats(&["x"], vec![(0..20).map(|i| i as f64).collect()]);
        let y = vec![2.5; 20];
        let front = symbolic_fit(&f, &y, "c", &small()).unwrap();
        assert_eq!(front.entries.len(), 1);
        assert_eq!(front.entries[0].complexity, 1);
        assert!(front.entries[0].mse < 1e-20);
    }

    #[test]
    fn inverse_square_with_noise() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<f64> = (0..300).map(|i| 0.5 + 1.5 * i as f64 / 299.0).collect();
        let y: Vec<f64> = r
            .iter()
            .map(|r| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (1.0 + 0.01 * z) / (r * r)
            })
            .collect();
        let f = feats(&["r"], vec![r]);
        let front = symbolic_fit(&f, &y, "f", &GpConfig::default()).unwrap();
        let best = select_best(&front).unwrap();
        let slope = power_law_slope(&best.expr, "r", (0.5, 2.0), 50, &BTreeMap::new()).unwrap().unwrap();
        assert!((slope + 2.0).abs() <= 0.05, "{} slope {slope}", best.expression);
    }

    #[test]
    fn front_is_monotone_and_deterministic() {
        let x: Vec<f64> = (0..40).map(|i| 0.2 + i as f64 * 0.05).collect();
        let y: Vec<f64> = x.iter().map(|x| x * x * x - x).collect();
        let f = feats(&["x"], vec![x]);
        let a = symbolic_fit(&f, &y, "y", &small()).unwrap();
        let b = symbolic_fit(&f, &y, "y", &small()).unwrap();
        assert_eq!(a, b);
        for w in a.entries.windows(2) {
            assert!(w[0].complexity < w[1].complexity && w[0].mse > w[1].mse);
        }
        for e in &a.entries {
            let dominated = a.entries.iter().any(|o| {
                o.complexity <= e.complexity && o.mse <= e.mse && (o.complexity < e.complexity || o.mse < e.mse)
            });
            assert!(!dominated);
            assert_eq!(mse(&e.expr, &f, &y).unwrap(), Some(e.mse));
        }
        assert!(a.entries.iter().all(|e| e.complexity <= 25));
    }

    #[test]
    fn selection_by_score() {
        let mk = |c, m| FrontEntry { complexity: c, mse: m, score: None, expr: Expr::Const(0.0), expression: String::new() };
        let front = ParetoFront { target: "y".into(), inputs: vec![], entries: vec![mk(1, 1.0), mk(3, 0.1), mk(9, 0.09)] };
        assert_eq!(select_best(&front).unwrap().complexity, 3);
        let single = ParetoFront { target: "y".into(), inputs: vec![], entries: vec![mk(1, 1.0)] };
        assert_eq!(select_best(&single).unwrap().complexity, 1);
    }

    #[test]
    fn slope_of_known_laws() {
        let e = Expr::bin(BinaryOp::Div, Expr::var("m"), Expr::bin(BinaryOp::Mul, Expr::var("r"), Expr::var("r")));
        let fixed = BTreeMap::from([("m".to_string(), 3.0)]);
        let s = power_law_slope(&e, "r", (0.5, 2.0), 20, &fixed).unwrap().unwrap();
        assert!((s + 2.0).abs() < 1e-12);
        let neg = Expr::bin(BinaryOp::Sub, Expr::Const(0.0), Expr::var("r"));
        assert_eq!(power_law_slope(&neg, "r", (0.5, 2.0), 20, &fixed).unwrap(), None);
    }
}
