//! Conditional-probability models: binary and multinomial logistic regression
//! fitted by Newton-Raphson (IRLS), weighted least squares for numeric
//! responses, and saturated frequency tables for all-discrete conditioning.
//!
//! Models are prepared once against a table (design matrix, response codes,
//! group membership) and can then be refitted cheaply under different row
//! weights, which is how bootstrap replicates reuse them.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CohortTable, Column};
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const COEFFICIENT_TOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-8;
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BinaryLogit,
    MultinomialLogit,
    /// Linear model for a numeric response, fitted by weighted least squares.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupFilter {
    pub variable: String,
    pub level: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    pub predictors: Vec<String>,
    /// Products of predictors; a name may repeat (e.g. a squared numeric term).
    #[serde(default)]
    pub interactions: Vec<Vec<String>>,
    pub family: Family,
    /// Fit only on rows where `variable == level`.
    #[serde(default)]
    pub fit_group: Option<GroupFilter>,
    /// Frequency table over the predictors instead of a regression; interactions are ignored.
    #[serde(default)]
    pub saturated: bool,
}

impl ModelSpec {
    pub fn new<S: AsRef<str>>(response: &str, predictors: &[S], family: Family) -> Self {
        ModelSpec {
            response: response.to_string(),
            predictors: predictors.iter().map(|p| p.as_ref().to_string()).collect(),
            interactions: Vec::new(),
            family,
            fit_group: None,
            saturated: false,
        }
    }

    pub fn saturated<S: AsRef<str>>(response: &str, conditioning: &[S], family: Family) -> Self {
        ModelSpec { saturated: true, ..ModelSpec::new(response, conditioning, family) }
    }

    pub fn with_interaction<S: AsRef<str>>(mut self, members: &[S]) -> Self {
        self.interactions.push(members.iter().map(|m| m.as_ref().to_string()).collect());
        self
    }

    pub fn in_group(mut self, variable: &str, level: &str) -> Self {
        self.fit_group = Some(GroupFilter { variable: variable.into(), level: level.into() });
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.predictors.iter().enumerate() {
            if self.predictors[..i].contains(p) {
                return Err(Error::Schema(format!("model for `{}` repeats predictor `{p}`", self.response)));
            }
            if *p == self.response {
                return Err(Error::Schema(format!("`{p}` is both response and predictor")));
            }
        }
        for inter in &self.interactions {
            if inter.len() < 2 {
                return Err(Error::Schema(format!(
                    "interaction {inter:?} in model for `{}` needs at least two members",
                    self.response
                )));
            }
            if let Some(m) = inter.iter().find(|m| !self.predictors.contains(m)) {
                return Err(Error::Schema(format!(
                    "interaction member `{m}` is not a predictor of `{}`",
                    self.response
                )));
            }
        }
        Ok(())
    }

    fn label(&self) -> String {
        match &self.fit_group {
            Some(g) => format!("{} | {}={}", self.response, g.variable, g.level),
            None => self.response.clone(),
        }
    }
}

/// One design column: a product of dummy indicators and numeric values.
#[derive(Debug, Clone, PartialEq)]
enum Factor {
    Dummy { column: String, level: String },
    Numeric { column: String },
}

#[derive(Debug, Clone, PartialEq)]
struct Term {
    name: String,
    factors: Vec<Factor>,
}

fn expand(column: &str, data: &CohortTable) -> Result<Vec<Term>> {
    Ok(match data.column(column)? {
        Column::Categorical { levels, .. } => levels[1..]
            .iter()
            .map(|l| Term {
                name: format!("{column}[{l}]"),
                factors: vec![Factor::Dummy { column: column.into(), level: l.clone() }],
            })
            .collect(),
        Column::Numeric(_) => vec![Term {
            name: column.to_string(),
            factors: vec![Factor::Numeric { column: column.into() }],
        }],
    })
}

fn layout(spec: &ModelSpec, data: &CohortTable) -> Result<Vec<Term>> {
    let mut terms = vec![Term { name: "(intercept)".into(), factors: Vec::new() }];
    for p in &spec.predictors {
        terms.extend(expand(p, data)?);
    }
    for inter in &spec.interactions {
        let mut acc = vec![Term { name: String::new(), factors: Vec::new() }];
        for member in inter {
            let parts = expand(member, data)?;
            acc = acc
                .iter()
                .flat_map(|a| {
                    parts.iter().map(move |b| Term {
                        name: if a.name.is_empty() { b.name.clone() } else { format!("{}:{}", a.name, b.name) },
                        factors: a.factors.iter().chain(&b.factors).cloned().collect(),
                    })
                })
                .collect();
        }
        terms.extend(acc);
    }
    Ok(terms)
}

/// Row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub term_names: Vec<String>,
    pub n: usize,
    pub p: usize,
    pub x: Vec<f64>,
}

impl Design {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }
}

fn build_design(terms: &[Term], data: &CohortTable) -> Result<Design> {
    enum Src<'a> {
        Dummy(&'a [u32], u32),
        Num(&'a [f64]),
    }
    let n = data.n_rows();
    let p = terms.len();
    let mut x = vec![1.0; n * p];
    for (t, term) in terms.iter().enumerate() {
        let mut srcs = Vec::with_capacity(term.factors.len());
        for f in &term.factors {
            match f {
                Factor::Dummy { column, level } => {
                    let (levels, codes) = data.categorical(column)?;
                    let code = levels.iter().position(|l| l == level).ok_or_else(|| {
                        Error::Schema(format!("column `{column}` lacks level `{level}` used by the model"))
                    })?;
                    srcs.push(Src::Dummy(codes, code as u32));
                }
                Factor::Numeric { column } => match data.column(column)? {
                    Column::Numeric(v) => srcs.push(Src::Num(v)),
                    Column::Categorical { .. } => {
                        return Err(Error::Schema(format!("column `{column}` must be numeric for this model")))
                    }
                },
            }
        }
        for i in 0..n {
            let mut v = 1.0;
            for s in &srcs {
                v *= match s {
                    Src::Dummy(codes, c) => (codes[i] == *c) as u8 as f64,
                    Src::Num(vals) => vals[i],
                };
            }
            x[i * p + t] = v;
        }
    }
    if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Schema(format!(
            "non-finite design value in term `{}` at row {}",
            terms[bad % p].name,
            bad / p + 1
        )));
    }
    Ok(Design { term_names: terms.iter().map(|t| t.name.clone()).collect(), n, p, x })
}

#[derive(Debug, Clone, PartialEq)]
enum Response {
    Classes { levels: Vec<String>, codes: Vec<u32> },
    Values(Vec<f64>),
}

fn response_of(spec: &ModelSpec, data: &CohortTable) -> Result<Response> {
    let col = data.column(&spec.response)?;
    match (spec.family, col) {
        (Family::Gaussian, _) => Ok(Response::Values(data.numeric(&spec.response)?)),
        (_, Column::Categorical { levels, codes }) => {
            if spec.family == Family::BinaryLogit && levels.len() != 2 {
                return Err(Error::Schema(format!(
                    "binary-logit response `{}` has {} levels",
                    spec.response,
                    levels.len()
                )));
            }
            Ok(Response::Classes { levels: levels.clone(), codes: codes.clone() })
        }
        (Family::BinaryLogit, Column::Numeric(v)) => {
            if v.iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(Error::Schema(format!("binary response `{}` must be 0/1", spec.response)));
            }
            Ok(Response::Classes {
                levels: vec!["0".into(), "1".into()],
                codes: v.iter().map(|&y| y as u32).collect(),
            })
        }
        (Family::MultinomialLogit, Column::Numeric(_)) => Err(Error::Schema(format!(
            "multinomial response `{}` must be categorical",
            spec.response
        ))),
    }
}

/// Fitted parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Params {
    /// One coefficient vector per non-reference response level (one for
    /// binary and Gaussian models).
    Coefficients(Vec<Vec<f64>>),
    /// Per conditioning cell: response-level probabilities (or the mean for
    /// a numeric response); `None` where the cell has no weight.
    Table(Vec<Option<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub term_names: Vec<String>,
    pub response_levels: Vec<String>,
    pub params: Params,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Ridge fallback was needed (separation or singular design).
    pub ridge: bool,
    /// Mean-scaled log-likelihood after each iteration.
    pub trace: Vec<f64>,
    #[serde(skip)]
    terms: Vec<Term>,
    #[serde(skip)]
    cell_columns: Vec<(String, Vec<String>)>,
}

impl FittedModel {
    pub fn n_classes(&self) -> usize {
        self.response_levels.len().max(1)
    }

    pub fn coefficients(&self) -> Option<&[Vec<f64>]> {
        match &self.params {
            Params::Coefficients(c) => Some(c),
            Params::Table(_) => None,
        }
    }

    /// Class probabilities per row (`n × K`, row-major). Saturated cells with
    /// no fitting weight yield NaN.
    pub fn predict_proba(&self, rows: &CohortTable) -> Result<Vec<f64>> {
        let prepared = Prepared::for_prediction(self, rows)?;
        let mut out = vec![0.0; rows.n_rows() * self.n_classes()];
        for i in 0..rows.n_rows() {
            prepared.probs_into(self, i, &mut out[i * self.n_classes()..(i + 1) * self.n_classes()]);
        }
        Ok(out)
    }

    /// Conditional mean per row: the linear predictor for Gaussian models,
    /// the expected numeric level for classification models.
    pub fn predict_mean(&self, rows: &CohortTable) -> Result<Vec<f64>> {
        let prepared = Prepared::for_prediction(self, rows)?;
        Ok((0..rows.n_rows()).map(|i| prepared.mean(self, i)).collect())
    }
}

/// A model bound to a table: design (or cell index), response and group mask.
#[derive(Debug, Clone)]
pub struct Prepared {
    spec: ModelSpec,
    terms: Vec<Term>,
    design: Option<Design>,
    cells: Option<(Vec<usize>, usize, Vec<(String, Vec<String>)>)>,
    response: Option<Response>,
    in_group: Vec<bool>,
}

impl Prepared {
    pub fn new(spec: &ModelSpec, data: &CohortTable) -> Result<Prepared> {
        spec.validate()?;
        let in_group = match &spec.fit_group {
            None => vec![true; data.n_rows()],
            Some(g) => {
                let col = data.column(&g.variable)?;
                if let Some(levels) = col.levels() {
                    if !levels.contains(&g.level) {
                        return Err(Error::Schema(format!(
                            "fit group level `{}` not among levels of `{}`",
                            g.level, g.variable
                        )));
                    }
                }
                (0..data.n_rows()).map(|r| col.label(r) == g.level).collect()
            }
        };
        let mut prepared = Prepared::bind(spec, data, None)?;
        prepared.response = Some(response_of(spec, data)?);
        prepared.in_group = in_group;
        Ok(prepared)
    }

    fn for_prediction(model: &FittedModel, rows: &CohortTable) -> Result<Prepared> {
        Prepared::bind(&model.spec, rows, Some(model))
    }

    fn bind(spec: &ModelSpec, data: &CohortTable, fitted: Option<&FittedModel>) -> Result<Prepared> {
        let mut out = Prepared {
            spec: spec.clone(),
            terms: Vec::new(),
            design: None,
            cells: None,
            response: None,
            in_group: Vec::new(),
        };
        if spec.saturated {
            let reference: Vec<(String, Vec<String>)> = match fitted {
                Some(m) => m.cell_columns.clone(),
                None => spec
                    .predictors
                    .iter()
                    .map(|p| {
                        let (levels, _) = data.categorical(p).map_err(|_| {
                            Error::Schema(format!("saturated model conditions on non-categorical `{p}`"))
                        })?;
                        Ok((p.clone(), levels.to_vec()))
                    })
                    .collect::<Result<_>>()?,
            };
            let mut index = vec![0usize; data.n_rows()];
            let mut n_cells = 1usize;
            for (name, levels) in &reference {
                let (have, codes) = data.categorical(name)?;
                let remap: Vec<Option<usize>> =
                    have.iter().map(|l| levels.iter().position(|x| x == l)).collect();
                for (r, &c) in codes.iter().enumerate() {
                    let k = remap[c as usize].ok_or_else(|| {
                        Error::Schema(format!("column `{name}` has a level unseen when fitting"))
                    })?;
                    index[r] = index[r] * levels.len() + k;
                }
                n_cells *= levels.len();
            }
            out.cells = Some((index, n_cells, reference));
        } else {
            let terms = match fitted {
                Some(m) => m.terms.clone(),
                None => layout(spec, data)?,
            };
            out.design = Some(build_design(&terms, data)?);
            out.terms = terms;
        }
        Ok(out)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn design(&self) -> Option<&Design> {
        self.design.as_ref()
    }

    pub fn n_rows(&self) -> usize {
        self.in_group.len()
    }

    /// Fit under row weights (length `n_rows`; rows outside the fit group are
    /// ignored). `warm` seeds Newton iterations with a previous fit.
    pub fn fit(&self, weights: &[f64], warm: Option<&FittedModel>) -> Result<FittedModel> {
        let response = self.response.as_ref().ok_or_else(|| Error::Unfitted(self.spec.label()))?;
        if weights.len() != self.n_rows() {
            return Err(Error::InvalidArgument("weight vector length differs from the table".into()));
        }
        let w: Vec<f64> = weights
            .iter()
            .zip(&self.in_group)
            .map(|(&w, &g)| if g { w } else { 0.0 })
            .collect();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidArgument("row weights must be finite and nonnegative".into()));
        }
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return Err(Error::EmptyCohort(format!("no rows to fit `{}`", self.spec.label())));
        }
        self.check_not_degenerate(response, &w)?;
        if self.spec.saturated {
            return Ok(self.fit_table(response, &w));
        }
        match response {
            Response::Values(y) => self.fit_gaussian(y, &w, total),
            Response::Classes { levels, codes } => self.fit_logit(levels, codes, &w, total, warm),
        }
    }

    fn check_not_degenerate(&self, response: &Response, w: &[f64]) -> Result<()> {
        let varies = match response {
            Response::Classes { codes, .. } => {
                let mut first = None;
                codes.iter().zip(w).filter(|(_, &w)| w > 0.0).any(|(&c, _)| *first.get_or_insert(c) != c)
            }
            Response::Values(y) => {
                if self.spec.saturated {
                    true
                } else {
                    let mut first = None;
                    y.iter().zip(w).filter(|(_, &w)| w > 0.0).any(|(&v, _)| *first.get_or_insert(v) != v)
                        || self.design.as_ref().is_some_and(|d| d.p == 1)
                }
            }
        };
        if varies {
            Ok(())
        } else {
            Err(Error::DegenerateResponse {
                response: self.spec.response.clone(),
                group: self.spec.fit_group.as_ref().map(|g| format!("{}={}", g.variable, g.level)),
            })
        }
    }

    fn fitted(&self, levels: Vec<String>, params: Params) -> FittedModel {
        FittedModel {
            spec: self.spec.clone(),
            term_names: self.design.as_ref().map(|d| d.term_names.clone()).unwrap_or_default(),
            response_levels: levels,
            params,
            converged: true,
            iterations: 0,
            log_likelihood: 0.0,
            ridge: false,
            trace: Vec::new(),
            terms: self.terms.clone(),
            cell_columns: self.cells.as_ref().map(|c| c.2.clone()).unwrap_or_default(),
        }
    }

    fn fit_table(&self, response: &Response, w: &[f64]) -> FittedModel {
        let (index, n_cells, _) = self.cells.as_ref().expect("saturated model has cells");
        let (levels, k) = match response {
            Response::Classes { levels, .. } => (levels.clone(), levels.len()),
            Response::Values(_) => (Vec::new(), 1),
        };
        let mut acc = vec![0.0; n_cells * k];
        let mut mass = vec![0.0; *n_cells];
        let mut ll = 0.0;
        for (r, &wr) in w.iter().enumerate() {
            if wr == 0.0 {
                continue;
            }
            let c = index[r];
            mass[c] += wr;
            match response {
                Response::Classes { codes, .. } => acc[c * k + codes[r] as usize] += wr,
                Response::Values(y) => acc[c] += wr * y[r],
            }
        }
        let table: Vec<Option<Vec<f64>>> = (0..*n_cells)
            .map(|c| (mass[c] > 0.0).then(|| acc[c * k..(c + 1) * k].iter().map(|a| a / mass[c]).collect()))
            .collect();
        if let Response::Classes { codes, .. } = response {
            for (r, &wr) in w.iter().enumerate() {
                if wr > 0.0 {
                    let p = table[index[r]].as_ref().expect("weighted cell")[codes[r] as usize];
                    ll += wr * p.ln();
                }
            }
        }
        let mut model = self.fitted(levels, Params::Table(table));
        model.log_likelihood = ll;
        model
    }

    fn fit_gaussian(&self, y: &[f64], w: &[f64], total: f64) -> Result<FittedModel> {
        let d = self.design.as_ref().expect("regression has a design");
        let p = d.p;
        let mut xtx = vec![0.0; p * p];
        let mut xty = vec![0.0; p];
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            let x = d.row(i);
            for s in 0..p {
                let ws = wi * x[s];
                xty[s] += ws * y[i];
                for t in s..p {
                    xtx[s * p + t] += ws * x[t];
                }
            }
        }
        let h = DMatrix::from_fn(p, p, |s, t| xtx[s.min(t) * p + s.max(t)] / total);
        let g = DVector::from_iterator(p, xty.iter().map(|v| v / total));
        let (beta, ridge) = match solve_spd(&h, &g, 0.0) {
            Some(b) => (b, false),
            None => {
                log::warn!("singular design for `{}`; applying ridge {RIDGE}", self.spec.label());
                (
                    solve_spd(&h, &g, RIDGE)
                        .ok_or_else(|| Error::SingularDesign(format!("model for `{}`", self.spec.label())))?,
                    true,
                )
            }
        };
        let mut rss = 0.0;
        for (i, &wi) in w.iter().enumerate() {
            if wi > 0.0 {
                let r = y[i] - dot(d.row(i), beta.as_slice());
                rss += wi * r * r;
            }
        }
        let sigma2 = (rss / total).max(f64::MIN_POSITIVE);
        let ll = -0.5 * total * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
        let mut model = self.fitted(Vec::new(), Params::Coefficients(vec![beta.as_slice().to_vec()]));
        model.iterations = 1;
        model.log_likelihood = ll;
        model.ridge = ridge;
        model.trace = vec![ll / total];
        Ok(model)
    }

    fn fit_logit(
        &self,
        levels: &[String],
        codes: &[u32],
        w: &[f64],
        total: f64,
        warm: Option<&FittedModel>,
    ) -> Result<FittedModel> {
        let d = self.design.as_ref().expect("regression has a design");
        let j = levels.len() - 1;
        let start: Vec<f64> = match warm.and_then(|m| m.coefficients()) {
            Some(c) if c.len() == j && c.iter().all(|v| v.len() == d.p) => c.concat(),
            _ => vec![0.0; j * d.p],
        };
        let problem = Logit { d, codes, w, total, j };
        match problem.newton(start.clone(), 0.0) {
            Ok(sol) => Ok(self.logit_model(levels, sol, false, total)),
            Err(trace) => {
                log::warn!(
                    "model for `{}` hit separation or a singular Hessian; refitting with ridge {RIDGE}",
                    self.spec.label()
                );
                match problem.newton(vec![0.0; j * d.p], RIDGE) {
                    Ok(sol) => Ok(self.logit_model(levels, sol, true, total)),
                    Err(mut ridge_trace) => {
                        let mut full = trace;
                        full.append(&mut ridge_trace);
                        Err(Error::NonConvergence { response: self.spec.label(), trace: full })
                    }
                }
            }
        }
    }

    fn logit_model(&self, levels: &[String], sol: Solution, ridge: bool, total: f64) -> FittedModel {
        let p = self.design.as_ref().expect("design").p;
        let coefs = sol.theta.chunks(p).map(|c| c.to_vec()).collect();
        let mut model = self.fitted(levels.to_vec(), Params::Coefficients(coefs));
        model.iterations = sol.iterations;
        model.log_likelihood = sol.trace.last().copied().unwrap_or(0.0) * total;
        model.trace = sol.trace;
        model.ridge = ridge;
        model
    }

    /// Weighted log-likelihood at `theta` (classification models; coefficients
    /// concatenated by non-reference level).
    pub fn log_likelihood(&self, weights: &[f64], theta: &[f64]) -> Result<f64> {
        let (d, codes, w, j) = self.logit_parts(weights)?;
        let total: f64 = w.iter().sum();
        Ok(Logit { d, codes, w: &w, total, j }.loglik(theta, 0.0) * total)
    }

    /// Analytic score (gradient of [`Prepared::log_likelihood`]).
    pub fn score(&self, weights: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        let (d, codes, w, j) = self.logit_parts(weights)?;
        let total: f64 = w.iter().sum();
        let (g, _, _) = Logit { d, codes, w: &w, total, j }.derivatives(theta, 0.0);
        Ok(g.iter().map(|v| v * total).collect())
    }

    fn logit_parts(&self, weights: &[f64]) -> Result<(&Design, &[u32], Vec<f64>, usize)> {
        let d = self.design.as_ref().ok_or_else(|| Error::InvalidArgument("saturated model has no likelihood surface".into()))?;
        match &self.response {
            Some(Response::Classes { levels, codes }) => {
                let w = weights.iter().zip(&self.in_group).map(|(&w, &g)| if g { w } else { 0.0 }).collect();
                Ok((d, codes, w, levels.len() - 1))
            }
            _ => Err(Error::InvalidArgument("not a classification model".into())),
        }
    }

    /// Write the class probabilities of row `i` into `out` (length K).
    pub fn probs_into(&self, model: &FittedModel, i: usize, out: &mut [f64]) {
        match &model.params {
            Params::Coefficients(c) => {
                let x = self.design.as_ref().expect("design").row(i);
                if model.response_levels.is_empty() {
                    out[0] = dot(x, &c[0]);
                    return;
                }
                softmax_into(c.iter().map(|b| dot(x, b)), out);
            }
            Params::Table(t) => {
                let (index, _, _) = self.cells.as_ref().expect("cells");
                match &t[index[i]] {
                    Some(v) => out.copy_from_slice(v),
                    None => out.iter_mut().for_each(|o| *o = f64::NAN),
                }
            }
        }
    }

    /// Probability of class `k` at row `i`.
    pub fn prob(&self, model: &FittedModel, i: usize, k: usize) -> f64 {
        let mut buf = [0.0f64; 16];
        let kk = model.n_classes();
        if kk <= 16 {
            self.probs_into(model, i, &mut buf[..kk]);
            buf[k]
        } else {
            let mut v = vec![0.0; kk];
            self.probs_into(model, i, &mut v);
            v[k]
        }
    }

    /// Conditional mean at row `i`.
    pub fn mean(&self, model: &FittedModel, i: usize) -> f64 {
        let k = model.n_classes();
        let mut v = vec![0.0; k];
        self.probs_into(model, i, &mut v);
        if model.response_levels.is_empty() {
            return v[0];
        }
        model
            .response_levels
            .iter()
            .zip(&v)
            .map(|(l, p)| l.parse::<f64>().unwrap_or(f64::NAN) * p)
            .sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `ln(1 + e^x)` without overflow.
fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Probabilities from non-reference linear predictors; the reference level has predictor 0.
fn softmax_into(etas: impl Iterator<Item = f64>, out: &mut [f64]) {
    out[0] = 0.0;
    let mut max = 0.0f64;
    for (k, e) in etas.enumerate() {
        out[k + 1] = e;
        max = max.max(e);
    }
    let mut s = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Solve `(H + λI) x = g` for symmetric positive definite `H` after Jacobi scaling.
fn solve_spd(h: &DMatrix<f64>, g: &DVector<f64>, ridge: f64) -> Option<DVector<f64>> {
    let n = h.nrows();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = h[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut a = DMatrix::from_fn(n, n, |i, j| h[(i, j)] * scale[i] * scale[j]);
    for i in 0..n {
        a[(i, i)] += ridge;
    }
    let b = DVector::from_fn(n, |i, _| g[i] * scale[i]);
    let chol = a.cholesky()?;
    // Reject numerically singular systems.
    let diag_min = (0..n).map(|i| chol.l_dirty()[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(diag_min > 1e-7) {
        return None;
    }
    let z = chol.solve(&b);
    let x = DVector::from_fn(n, |i, _| z[i] * scale[i]);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

struct Logit<'a> {
    d: &'a Design,
    codes: &'a [u32],
    w: &'a [f64],
    total: f64,
    j: usize,
}

struct Solution {
    theta: Vec<f64>,
    iterations: usize,
    trace: Vec<f64>,
}

impl Logit<'_> {
    /// Mean-scaled penalized log-likelihood.
    fn loglik(&self, theta: &[f64], ridge: f64) -> f64 {
        let (p, j) = (self.d.p, self.j);
        let mut ll = 0.0;
        let mut eta = vec![0.0; j];
        for (i, &wi) in self.w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            let x = self.d.row(i);
            if j == 1 {
                let eta = dot(x, theta);
                ll -= wi * log1p_exp(if self.codes[i] == 1 { -eta } else { eta });
                continue;
            }
            let mut max = 0.0f64;
            for (k, e) in eta.iter_mut().enumerate() {
                *e = dot(x, &theta[k * p..(k + 1) * p]);
                max = max.max(*e);
            }
            let lse = max + ((-max).exp() + eta.iter().map(|e| (e - max).exp()).sum::<f64>()).ln();
            let c = self.codes[i] as usize;
            let own = if c == 0 { 0.0 } else { eta[c - 1] };
            ll += wi * (own - lse);
        }
        ll / self.total - 0.5 * ridge * theta.iter().map(|t| t * t).sum::<f64>()
    }

    /// Mean-scaled gradient, negative Hessian (upper triangle filled) and log-likelihood.
    fn derivatives(&self, theta: &[f64], ridge: f64) -> (Vec<f64>, DMatrix<f64>, f64) {
        let (p, j) = (self.d.p, self.j);
        let q = p * j;
        let mut g = vec![0.0; q];
        let mut h = vec![0.0; q * q];
        let mut pi = vec![0.0; j + 1];
        let mut ll = 0.0;
        for (i, &wi) in self.w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            let x = self.d.row(i);
            let c = self.codes[i] as usize;
            if j == 1 {
                // Binary response: same algebra without the softmax vector.
                let eta = dot(x, theta);
                let p1 = expit(eta);
                ll -= wi * log1p_exp(if c == 1 { -eta } else { eta });
                let wr = wi * ((c == 1) as u8 as f64 - p1);
                let v = wi * p1 * (1.0 - p1);
                for (s, (gs, xs)) in g.iter_mut().zip(x).enumerate() {
                    *gs += wr * xs;
                    let vs = v * xs;
                    for (hv, xt) in h[s * q + s..(s + 1) * q].iter_mut().zip(&x[s..]) {
                        *hv += vs * xt;
                    }
                }
                continue;
            }
            softmax_into((0..j).map(|k| dot(x, &theta[k * p..(k + 1) * p])), &mut pi);
            ll += wi * pi[c].max(f64::MIN_POSITIVE).ln();
            for a in 0..j {
                let resid = (c == a + 1) as u8 as f64 - pi[a + 1];
                let wr = wi * resid;
                for (gs, xs) in g[a * p..(a + 1) * p].iter_mut().zip(x) {
                    *gs += wr * xs;
                }
                for b in a..j {
                    let v = wi * pi[a + 1] * ((a == b) as u8 as f64 - pi[b + 1]);
                    if v == 0.0 {
                        continue;
                    }
                    for (s, xs) in x.iter().enumerate() {
                        let vs = v * xs;
                        let row = (a * p + s) * q + b * p;
                        let t0 = if a == b { s } else { 0 };
                        for (hv, xt) in h[row + t0..row + p].iter_mut().zip(&x[t0..]) {
                            *hv += vs * xt;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / self.total;
        let g: Vec<f64> = g.iter().zip(theta).map(|(v, t)| v * inv - ridge * t).collect();
        let hm = DMatrix::from_fn(q, q, |r, c| {
            let (lo, hi) = (r.min(c), r.max(c));
            h[lo * q + hi] * inv + if r == c { ridge } else { 0.0 }
        });
        let ll = ll * inv - 0.5 * ridge * theta.iter().map(|t| t * t).sum::<f64>();
        (g, hm, ll)
    }

    /// Newton-Raphson with step halving. `Err` carries the trace on failure.
    fn newton(&self, mut theta: Vec<f64>, ridge: f64) -> std::result::Result<Solution, Vec<f64>> {
        let mut trace = Vec::new();
        for iter in 1..=MAX_ITERATIONS {
            let (g, h, ll) = self.derivatives(&theta, ridge);
            if !ll.is_finite() {
                return Err(trace);
            }
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let Some(step) = solve_spd(&h, &DVector::from_vec(g), 0.0) else {
                trace.push(ll);
                return Err(trace);
            };
            let scale = theta.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let change = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gmax <= GRADIENT_TOL && change <= COEFFICIENT_TOL * scale {
                theta.iter_mut().zip(step.iter()).for_each(|(a, b)| *a += b);
                trace.push(ll);
                return Ok(Solution { theta, iterations: iter, trace });
            }
            let mut t = 1.0;
            let mut next: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let mut ll_next = self.loglik(&next, ridge);
            while !(ll_next >= ll - 1e-12 * ll.abs().max(1.0)) && t > 1e-9 {
                t *= 0.5;
                next = theta.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
                ll_next = self.loglik(&next, ridge);
            }
            trace.push(ll_next);
            theta = next;
            // Coefficients running off under separation.
            if ridge == 0.0 && scale > 1e8 {
                return Err(trace);
            }
        }
        Err(trace)
    }
}

/// Fit a regression (or saturated) model on a table.
pub fn fit(spec: &ModelSpec, data: &CohortTable, row_weights: Option<&[f64]>) -> Result<FittedModel> {
    let prepared = Prepared::new(spec, data)?;
    let base = data.base_weights();
    let w: Vec<f64> = match row_weights {
        Some(rw) => {
            if rw.len() != base.len() {
                return Err(Error::InvalidArgument("row weight length differs from the table".into()));
            }
            base.iter().zip(rw).map(|(a, b)| a * b).collect()
        }
        None => base,
    };
    prepared.fit(&w, None)
}

/// Conditional frequency table of a categorical response (or cell means of a
/// numeric one) given categorical conditioning columns.
pub fn fit_saturated<S: AsRef<str>>(
    response: &str,
    conditioning: &[S],
    data: &CohortTable,
    fit_group: Option<GroupFilter>,
) -> Result<FittedModel> {
    let family = match data.column(response)? {
        Column::Categorical { .. } => Family::MultinomialLogit,
        Column::Numeric(_) => Family::Gaussian,
    };
    let mut spec = ModelSpec::saturated(response, conditioning, family);
    spec.fit_group = fit_group;
    fit(&spec, data, None)
}

/// Probability columns of each fitted class, keyed by level label.
pub fn class_columns(model: &FittedModel, rows: &CohortTable) -> Result<HashMap<String, Vec<f64>>> {
    let probs = model.predict_proba(rows)?;
    let k = model.n_classes();
    Ok(model
        .response_levels
        .iter()
        .enumerate()
        .map(|(c, l)| (l.clone(), probs.iter().skip(c).step_by(k).copied().collect()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::worked_joint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn binary_table(y: Vec<u32>, x: Vec<f64>) -> CohortTable {
        CohortTable::new(
            vec!["y".into(), "x".into()],
            vec![
                Column::Categorical { levels: vec!["0".into(), "1".into()], codes: y },
                Column::Numeric(x),
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn intercept_only_closed_form() {
        let y = vec![1, 0, 0, 0, 1, 0, 0, 0];
        let t = binary_table(y, vec![0.0; 8]);
        let empty: [&str; 0] = [];
        let m = fit(&ModelSpec::new("y", &empty, Family::BinaryLogit), &t, None).unwrap();
        let b = m.coefficients().unwrap()[0][0];
        assert!((b - (0.25f64 / 0.75).ln()).abs() < 1e-10, "{b}");
        let p = m.predict_proba(&t).unwrap();
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn recovers_logistic_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 50_000;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<u32> = x
            .iter()
            .map(|&x| (rng.random::<f64>() < 1.0 / (1.0 + (-(-0.5 + 1.2 * x)).exp())) as u32)
            .collect();
        let t = binary_table(y, x);
        let m = fit(&ModelSpec::new("y", &["x"], Family::BinaryLogit), &t, None).unwrap();
        let c = &m.coefficients().unwrap()[0];
        // Standard errors at this n are about 0.012 and 0.012.
        assert!((c[0] + 0.5).abs() < 0.04, "{c:?}");
        assert!((c[1] - 1.2).abs() < 0.04, "{c:?}");
        assert!(m.converged && !m.ridge);
    }

    #[test]
    fn weight_scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 500;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<u32> = x.iter().map(|&x| (rng.random::<f64>() < 0.3 + 0.2 * x) as u32).collect();
        let t = binary_table(y, x);
        let spec = ModelSpec::new("y", &["x"], Family::BinaryLogit);
        let a = fit(&spec, &t, None).unwrap();
        let b = fit(&spec, &t, Some(&vec![7.5; n])).unwrap();
        for (u, v) in a.coefficients().unwrap()[0].iter().zip(&b.coefficients().unwrap()[0]) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn multinomial_zero_coefficients_are_uniform() {
        let mut probs = [0.0; 3];
        softmax_into([0.0, 0.0].into_iter(), &mut probs);
        for p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_reproduces_worked_conditionals() {
        let t = CohortTable::from_joint(&worked_joint());
        let m = fit_saturated("M", &["R", "A"], &t, None).unwrap();
        let p = m.predict_proba(&t).unwrap();
        let (_, r) = t.categorical("R").unwrap();
        let (_, a) = t.categorical("A").unwrap();
        for i in 0..t.n_rows() {
            let expect = if r[i] == 0 { 0.2 + 0.2 * a[i] as f64 } else { 0.6 + 0.2 * a[i] as f64 };
            assert!((p[2 * i + 1] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_empty_cell_is_undefined() {
        let t = CohortTable::from_joint(&worked_joint());
        let only_a0 = t.filter(|r| t.categorical("A").unwrap().1[r] == 0);
        let m = fit_saturated("M", &["A"], &only_a0, None).unwrap();
        let p = m.predict_proba(&t).unwrap();
        let a = t.categorical("A").unwrap().1;
        for i in 0..t.n_rows() {
            assert_eq!(p[2 * i].is_nan(), a[i] == 1);
        }
    }

    #[test]
    fn degenerate_response_is_an_error() {
        let t = binary_table(vec![1; 5], vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        let err = fit(&ModelSpec::new("y", &["x"], Family::BinaryLogit), &t, None).unwrap_err();
        assert!(matches!(err, Error::DegenerateResponse { .. }));
    }

    #[test]
    fn separation_falls_back_to_ridge() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<u32> = (0..20).map(|i| (i >= 10) as u32).collect();
        let t = binary_table(y, x);
        let m = fit(&ModelSpec::new("y", &["x"], Family::BinaryLogit), &t, None).unwrap();
        assert!(m.ridge);
    }

    #[test]
    fn gaussian_matches_closed_form() {
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let y = vec![1.0, 3.0, 5.0, 7.0];
        let t = CohortTable::new(
            vec!["y".into(), "x".into()],
            vec![Column::Numeric(y), Column::Numeric(x)],
            None,
        )
        .unwrap();
        let m = fit(&ModelSpec::new("y", &["x"], Family::Gaussian), &t, None).unwrap();
        let c = &m.coefficients().unwrap()[0];
        assert!((c[0] - 1.0).abs() < 1e-10 && (c[1] - 2.0).abs() < 1e-10);
    }
}
