//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Mirrors the behavior of the PyTorch `LBFGS` optimizer with
//! `line_search_fn="strong_wolfe"`, one outer iteration per [`Lbfgs::step`].

use std::collections::VecDeque;

use ndarray::Array1;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub learning_rate: f64,
    pub history_size: usize,
    pub tolerance_grad: f64,
    pub tolerance_change: f64,
    pub max_line_search: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            history_size: 10,
            tolerance_grad: 1e-7,
            tolerance_change: 1e-9,
            max_line_search: 25,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

/// One evaluation of the objective: value, gradient and an arbitrary payload
/// carried along with the point (e.g. a loss breakdown).
#[derive(Debug, Clone)]
pub struct Sample<P> {
    pub value: f64,
    pub grad: Array1<f64>,
    pub payload: P,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    StepTolerance,
    ValueTolerance,
    DescentLost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    Converged(StopReason),
}

pub struct Lbfgs<P> {
    cfg: LbfgsConfig,
    current: Sample<P>,
    old_s: VecDeque<Array1<f64>>,
    old_y: VecDeque<Array1<f64>>,
    ro: VecDeque<f64>,
    h_diag: f64,
    direction: Option<Array1<f64>>,
    step_len: f64,
    prev_grad: Option<Array1<f64>>,
    n_iter: usize,
    func_evals: usize,
}

fn dot(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b)
}

fn max_abs(a: &Array1<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

impl<P: Clone> Lbfgs<P> {
    /// `initial` must be the objective evaluated at the starting point.
    pub fn new(cfg: LbfgsConfig, initial: Sample<P>) -> Self {
        Self {
            cfg,
            current: initial,
            old_s: VecDeque::new(),
            old_y: VecDeque::new(),
            ro: VecDeque::new(),
            h_diag: 1.0,
            direction: None,
            step_len: 0.0,
            prev_grad: None,
            n_iter: 0,
            func_evals: 1,
        }
    }

    pub fn current(&self) -> &Sample<P> {
        &self.current
    }

    pub fn iterations(&self) -> usize {
        self.n_iter
    }

    pub fn function_evaluations(&self) -> usize {
        self.func_evals
    }

    /// Replaces the cached evaluation at the current point, e.g. after the
    /// objective itself changed between iterations. Curvature history is kept.
    pub fn refresh(&mut self, sample: Sample<P>) {
        self.current = sample;
    }

    /// Runs one outer iteration, updating `x` in place.
    pub fn step<F>(&mut self, x: &mut Array1<f64>, mut f: F) -> Result<StepOutcome>
    where
        F: FnMut(&Array1<f64>) -> Result<Sample<P>>,
    {
        let cfg = self.cfg;
        if max_abs(&self.current.grad) <= cfg.tolerance_grad {
            return Ok(StepOutcome::Converged(StopReason::GradientTolerance));
        }
        self.n_iter += 1;
        let g = self.current.grad.clone();

        let d = match (&self.direction, &self.prev_grad) {
            (Some(prev_d), Some(prev_g)) => {
                let y = &g - prev_g;
                let s = prev_d * self.step_len;
                let ys = dot(&y, &s);
                if ys > 1e-10 {
                    if self.old_s.len() == cfg.history_size {
                        self.old_s.pop_front();
                        self.old_y.pop_front();
                        self.ro.pop_front();
                    }
                    self.h_diag = ys / dot(&y, &y);
                    self.old_s.push_back(s);
                    self.old_y.push_back(y);
                    self.ro.push_back(1.0 / ys);
                }
                let n = self.old_s.len();
                let mut al = vec![0.0; n];
                let mut q = -&g;
                for i in (0..n).rev() {
                    al[i] = dot(&self.old_s[i], &q) * self.ro[i];
                    q.scaled_add(-al[i], &self.old_y[i]);
                }
                let mut r = q * self.h_diag;
                for i in 0..n {
                    let be = dot(&self.old_y[i], &r) * self.ro[i];
                    r.scaled_add(al[i] - be, &self.old_s[i]);
                }
                r
            }
            _ => {
                self.h_diag = 1.0;
                -&g
            }
        };
        self.prev_grad = Some(g.clone());
        let prev_value = self.current.value;

        let t0 = if self.n_iter == 1 {
            let l1: f64 = g.iter().map(|v| v.abs()).sum();
            (1.0_f64).min(1.0 / l1) * cfg.learning_rate
        } else {
            cfg.learning_rate
        };
        let gtd = dot(&g, &d);
        if gtd > -cfg.tolerance_change {
            self.direction = Some(d);
            self.step_len = t0;
            return Ok(StepOutcome::Converged(StopReason::DescentLost));
        }

        let (sample, t, evals) = strong_wolfe(&mut f, x, t0, &d, &self.current, gtd, &cfg)?;
        self.func_evals += evals;
        x.scaled_add(t, &d);
        self.current = sample;
        let step_max = max_abs(&d) * t.abs();
        self.direction = Some(d);
        self.step_len = t;

        if max_abs(&self.current.grad) <= cfg.tolerance_grad {
            return Ok(StepOutcome::Converged(StopReason::GradientTolerance));
        }
        if step_max <= cfg.tolerance_change {
            return Ok(StepOutcome::Converged(StopReason::StepTolerance));
        }
        if (self.current.value - prev_value).abs() < cfg.tolerance_change {
            return Ok(StepOutcome::Converged(StopReason::ValueTolerance));
        }
        Ok(StepOutcome::Continue)
    }
}

fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, bounds: Option<(f64, f64)>) -> f64 {
    let (xmin_bound, xmax_bound) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_square = d1 * d1 - g1 * g2;
    if d2_square >= 0.0 {
        let d2 = d2_square.sqrt();
        let min_pos = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if min_pos.is_nan() {
            return (xmin_bound + xmax_bound) / 2.0;
        }
        min_pos.max(xmin_bound).min(xmax_bound)
    } else {
        (xmin_bound + xmax_bound) / 2.0
    }
}

fn sanitize<P>(mut s: Sample<P>) -> Sample<P> {
    if !s.value.is_finite() {
        s.value = f64::INFINITY;
    }
    s
}

#[derive(Clone)]
struct Point<P> {
    t: f64,
    sample: Sample<P>,
    gtd: f64,
}

fn strong_wolfe<P: Clone, F>(
    f: &mut F,
    x: &Array1<f64>,
    mut t: f64,
    d: &Array1<f64>,
    start: &Sample<P>,
    gtd: f64,
    cfg: &LbfgsConfig,
) -> Result<(Sample<P>, f64, usize)>
where
    F: FnMut(&Array1<f64>) -> Result<Sample<P>>,
{
    let d_norm = max_abs(d);
    let mut eval = |t: f64| -> Result<Point<P>> {
        let mut xt = x.clone();
        xt.scaled_add(t, d);
        let sample = sanitize(f(&xt)?);
        let gtd = dot(&sample.grad, d);
        Ok(Point { t, sample, gtd })
    };
    let f0 = start.value;
    let mut new = eval(t)?;
    let mut evals = 1;
    let mut prev = Point {
        t: 0.0,
        sample: start.clone(),
        gtd,
    };
    let mut ls_iter = 0;
    let mut done = false;
    let mut bracket: Vec<Point<P>> = Vec::new();

    while ls_iter < cfg.max_line_search {
        if new.sample.value > f0 + cfg.c1 * t * gtd || (ls_iter > 1 && new.sample.value >= prev.sample.value) {
            bracket = vec![prev.clone(), new.clone()];
            break;
        }
        if new.gtd.abs() <= -cfg.c2 * gtd {
            bracket = vec![new.clone()];
            done = true;
            break;
        }
        if new.gtd >= 0.0 {
            bracket = vec![prev.clone(), new.clone()];
            break;
        }
        let min_step = t + 0.01 * (t - prev.t);
        let max_step = t * 10.0;
        t = cubic_interpolate(
            prev.t,
            prev.sample.value,
            prev.gtd,
            t,
            new.sample.value,
            new.gtd,
            Some((min_step, max_step)),
        );
        prev = new;
        new = eval(t)?;
        evals += 1;
        ls_iter += 1;
    }
    if ls_iter == cfg.max_line_search {
        bracket = vec![
            Point {
                t: 0.0,
                sample: start.clone(),
                gtd,
            },
            new,
        ];
    }

    if bracket.len() == 1 {
        let p = bracket.pop().expect("one point");
        return Ok((p.sample, p.t, evals));
    }

    let mut insuf_progress = false;
    let (mut low, mut high) = if bracket[0].sample.value <= bracket[1].sample.value {
        (0, 1)
    } else {
        (1, 0)
    };
    while !done && ls_iter < cfg.max_line_search {
        if (bracket[1].t - bracket[0].t).abs() * d_norm < cfg.tolerance_change {
            break;
        }
        let (b0, b1) = (&bracket[0], &bracket[1]);
        t = cubic_interpolate(b0.t, b0.sample.value, b0.gtd, b1.t, b1.sample.value, b1.gtd, None);
        let bmax = b0.t.max(b1.t);
        let bmin = b0.t.min(b1.t);
        let eps = 0.1 * (bmax - bmin);
        if (bmax - t).min(t - bmin) < eps {
            if insuf_progress || t >= bmax || t <= bmin {
                t = if (t - bmax).abs() < (t - bmin).abs() {
                    bmax - eps
                } else {
                    bmin + eps
                };
                insuf_progress = false;
            } else {
                insuf_progress = true;
            }
        } else {
            insuf_progress = false;
        }
        let p = eval(t)?;
        evals += 1;
        ls_iter += 1;
        if p.sample.value > f0 + cfg.c1 * t * gtd || p.sample.value >= bracket[low].sample.value {
            bracket[high] = p;
            (low, high) = if bracket[0].sample.value <= bracket[1].sample.value {
                (0, 1)
            } else {
                (1, 0)
            };
        } else {
            if p.gtd.abs() <= -cfg.c2 * gtd {
                done = true;
            } else if p.gtd * (bracket[high].t - bracket[low].t) >= 0.0 {
                bracket[high] = bracket[low].clone();
            }
            bracket[low] = p;
        }
    }
    let p = bracket.swap_remove(low);
    Ok((p.sample, p.t, evals))
}
