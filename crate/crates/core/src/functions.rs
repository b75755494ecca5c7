//! Built-in space-time functions selectable by name from configuration.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::registry::Registry;

/// Scalar function of `(x, y, t)`.
pub trait SpaceTimeFunction: Send + Sync {
    fn eval(&self, x: f64, y: f64, t: f64) -> f64;

    /// `false` lets callers assemble loads once for all time steps.
    fn time_dependent(&self) -> bool {
        true
    }

    /// `true` when the function vanishes identically.
    fn is_zero(&self) -> bool {
        false
    }
}

struct Constant(f64);

impl SpaceTimeFunction for Constant {
    fn eval(&self, _: f64, _: f64, _: f64) -> f64 {
        self.0
    }

    fn time_dependent(&self) -> bool {
        false
    }

    fn is_zero(&self) -> bool {
        self.0 == 0.0
    }
}

struct Steady<F>(F);

impl<F: Fn(f64, f64) -> f64 + Send + Sync> SpaceTimeFunction for Steady<F> {
    fn eval(&self, x: f64, y: f64, _: f64) -> f64 {
        (self.0)(x, y)
    }

    fn time_dependent(&self) -> bool {
        false
    }
}

struct Unsteady<F>(F);

impl<F: Fn(f64, f64, f64) -> f64 + Send + Sync> SpaceTimeFunction for Unsteady<F> {
    fn eval(&self, x: f64, y: f64, t: f64) -> f64 {
        (self.0)(x, y, t)
    }
}

/// Registry with the built-in functions:
///
/// | name | value |
/// |---|---|
/// | `zero` | 0 |
/// | `one` | 1 |
/// | `x` | x |
/// | `x-plus-y` | x + y |
/// | `sin2pix-sin2piy` | sin(2πx) sin(2πy) |
/// | `sin2pix-sinpiy` | sin(2πx) sin(πy) |
/// | `decaying-sin2pix-sinpiy` | e^{−πt} sin(2πx) sin(πy) |
/// | `decaying-sin2pix-sin2piy` | e^{−8π²t} sin(2πx) sin(2πy) |
pub fn builtin_functions() -> Registry<dyn SpaceTimeFunction> {
    let mut reg: Registry<dyn SpaceTimeFunction> = Registry::new("function");
    reg.register("zero", Arc::new(Constant(0.0)));
    reg.register("one", Arc::new(Constant(1.0)));
    reg.register("x", Arc::new(Steady(|x: f64, _: f64| x)));
    reg.register("x-plus-y", Arc::new(Steady(|x: f64, y: f64| x + y)));
    reg.register(
        "sin2pix-sin2piy",
        Arc::new(Steady(|x: f64, y: f64| (2.0 * PI * x).sin() * (2.0 * PI * y).sin())),
    );
    reg.register(
        "sin2pix-sinpiy",
        Arc::new(Steady(|x: f64, y: f64| (2.0 * PI * x).sin() * (PI * y).sin())),
    );
    reg.register(
        "decaying-sin2pix-sinpiy",
        Arc::new(Unsteady(|x: f64, y: f64, t: f64| {
            (-PI * t).exp() * (2.0 * PI * x).sin() * (PI * y).sin()
        })),
    );
    reg.register(
        "decaying-sin2pix-sin2piy",
        Arc::new(Unsteady(|x: f64, y: f64, t: f64| {
            (-8.0 * PI * PI * t).exp() * (2.0 * PI * x).sin() * (2.0 * PI * y).sin()
        })),
    );
    reg
}
