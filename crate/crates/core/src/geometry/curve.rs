//! Parametric plane curves on `u ∈ [0, 1]` with exact first and second
//! derivatives.

use std::sync::Arc;

use crate::expr::{Expr, ExprError};

pub type P2 = [f64; 2];

pub fn sub(a: P2, b: P2) -> P2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn norm(a: P2) -> f64 {
    a[0].hypot(a[1])
}

pub fn dist(a: P2, b: P2) -> f64 {
    norm(sub(a, b))
}

pub fn cross(a: P2, b: P2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn dot(a: P2, b: P2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Wraps `a` into `(c - π, c + π]`.
pub fn wrap_near(a: f64, c: f64) -> f64 {
    use std::f64::consts::PI;
    let mut d = (a - c) % (2.0 * PI);
    if d > PI {
        d -= 2.0 * PI;
    } else if d <= -PI {
        d += 2.0 * PI;
    }
    c + d
}

/// Point, first and second derivative with respect to the curve parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveJet {
    pub p: P2,
    pub d1: P2,
    pub d2: P2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Line {
        a: P2,
        b: P2,
    },
    /// `center + radius (cos θ, sin θ)`, `θ = th0 + u (th1 - th0)`.
    Circle {
        center: P2,
        radius: f64,
        th0: f64,
        th1: f64,
    },
    /// Expressions in `ξ = 2u - 1` (variable index 0), with their
    /// symbolic first and second derivatives.
    Param {
        x: [Expr; 3],
        y: [Expr; 3],
    },
}

impl Shape {
    pub fn param(x: Expr, y: Expr) -> Shape {
        let x1 = x.diff(0);
        let x2 = x1.diff(0);
        let y1 = y.diff(0);
        let y2 = y1.diff(0);
        Shape::Param {
            x: [x, x1, x2],
            y: [y, y1, y2],
        }
    }

    fn jet(&self, u: f64) -> Result<CurveJet, ExprError> {
        Ok(match self {
            Shape::Line { a, b } => CurveJet {
                p: [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])],
                d1: sub(*b, *a),
                d2: [0.0, 0.0],
            },
            Shape::Circle {
                center,
                radius,
                th0,
                th1,
            } => {
                let w = th1 - th0;
                let th = th0 + u * w;
                let (s, c) = th.sin_cos();
                CurveJet {
                    p: [center[0] + radius * c, center[1] + radius * s],
                    d1: [-radius * s * w, radius * c * w],
                    d2: [-radius * c * w * w, -radius * s * w * w],
                }
            }
            Shape::Param { x, y } => {
                let xi = 2.0 * u - 1.0;
                let e = |f: &Expr| f.eval(xi, 0.0);
                CurveJet {
                    p: [e(&x[0])?, e(&y[0])?],
                    d1: [2.0 * e(&x[1])?, 2.0 * e(&y[1])?],
                    d2: [4.0 * e(&x[2])?, 4.0 * e(&y[2])?],
                }
            }
        })
    }
}

/// A shape restricted to the parameter range `[u0, u1]` and
/// reparameterized over `[0, 1]`. `u0 > u1` reverses the direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    shape: Arc<Shape>,
    u0: f64,
    u1: f64,
}

impl Curve {
    pub fn new(shape: Shape) -> Curve {
        Curve {
            shape: Arc::new(shape),
            u0: 0.0,
            u1: 1.0,
        }
    }

    pub fn line(a: P2, b: P2) -> Curve {
        Curve::new(Shape::Line { a, b })
    }

    pub fn circle(center: P2, radius: f64, th0: f64, th1: f64) -> Curve {
        Curve::new(Shape::Circle {
            center,
            radius,
            th0,
            th1,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn is_straight(&self) -> bool {
        matches!(*self.shape, Shape::Line { .. })
    }

    pub fn reversed(&self) -> Curve {
        Curve {
            shape: self.shape.clone(),
            u0: self.u1,
            u1: self.u0,
        }
    }

    /// Portion between local parameters `a` and `b`.
    pub fn sub(&self, a: f64, b: f64) -> Curve {
        let w = self.u1 - self.u0;
        Curve {
            shape: self.shape.clone(),
            u0: self.u0 + a * w,
            u1: self.u0 + b * w,
        }
    }

    pub fn jet(&self, u: f64) -> Result<CurveJet, ExprError> {
        let w = self.u1 - self.u0;
        let j = self.shape.jet(self.u0 + u * w)?;
        Ok(CurveJet {
            p: j.p,
            d1: [j.d1[0] * w, j.d1[1] * w],
            d2: [j.d2[0] * w * w, j.d2[1] * w * w],
        })
    }

    pub fn point(&self, u: f64) -> Result<P2, ExprError> {
        Ok(self.jet(u)?.p)
    }

    /// Arc length by Gauss quadrature.
    pub fn length(&self) -> Result<f64, ExprError> {
        let rule = crate::basis::gauss_rule(24).expect("positive order");
        let mut acc = 0.0;
        for (&r, &w) in rule.nodes.iter().zip(&rule.weights) {
            acc += 0.5 * w * norm(self.jet(0.5 * (r + 1.0))?.d1);
        }
        Ok(acc)
    }

    /// Polyline samples `u = i/n`, `i = 0..=n`.
    pub fn samples(&self, n: usize) -> Result<Vec<P2>, ExprError> {
        (0..=n).map(|i| self.point(i as f64 / n as f64)).collect()
    }

    /// Portable description for dumps.
    pub fn describe(&self) -> serde_json::Value {
        use crate::expr::XY;
        let range = serde_json::json!([self.u0, self.u1]);
        match &*self.shape {
            Shape::Line { a, b } => serde_json::json!({"type": "line", "from": a, "to": b, "range": range}),
            Shape::Circle {
                center,
                radius,
                th0,
                th1,
            } => serde_json::json!({"type": "circle", "center": center, "radius": radius, "theta": [th0, th1], "range": range}),
            Shape::Param { x, y } => serde_json::json!({
                "type": "param",
                "x": x[0].display_with(&["t", XY[1]]).to_string(),
                "y": y[0].display_with(&["t", XY[1]]).to_string(),
                "range": range,
            }),
        }
    }
}
