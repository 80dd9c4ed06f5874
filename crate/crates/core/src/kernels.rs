//! The bundled mini-kernels, their reference inputs and random input
//! generators.

use rand::Rng;

use crate::mir::{parse_module_named, Module, ParseError};
use crate::transforms::Pass;
use crate::vm::{Input, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct Kernel {
    pub name: &'static str,
    pub source: &'static str,
    pub reference_input: &'static str,
}

macro_rules! kernel {
    ($name:literal) => {
        Kernel {
            name: $name,
            source: include_str!(concat!("../kernels/", $name, ".ir")),
            reference_input: include_str!(concat!("../kernels/", $name, ".input")),
        }
    };
}

pub const KERNELS: &[Kernel] = &[
    kernel!("dot"),
    kernel!("saxpy"),
    kernel!("saxpy_unrolled"),
    kernel!("stencil"),
    kernel!("gather2d"),
    kernel!("pointer_walk"),
    kernel!("sr_showcase"),
];

pub fn by_name(name: &str) -> Option<&'static Kernel> {
    KERNELS.iter().find(|k| k.name == name)
}

impl Kernel {
    pub fn file_name(&self) -> String {
        format!("{}.ir", self.name)
    }

    pub fn module(&self) -> Result<Module, ParseError> {
        parse_module_named(self.source, &self.file_name())
    }

    pub fn input(&self) -> Input {
        Input::parse(self.reference_input).expect("bundled input parses")
    }

    /// Classic optimizations that give this kernel its shape before the
    /// resilience passes run.
    pub fn classic_passes(&self) -> Vec<Pass> {
        match self.name {
            "sr_showcase" => vec![Pass::StrengthReduce],
            _ => Vec::new(),
        }
    }

    /// A random input with trip counts of at most 64.
    pub fn random_input(&self, rng: &mut impl Rng) -> Input {
        let mut input = Input::default();
        let floats = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<Scalar> {
            (0..n)
                .map(|_| Scalar::Float(rng.gen_range(-10.0..10.0)))
                .collect()
        };
        match self.name {
            "dot" => {
                input.set_int("n", rng.gen_range(0..=64));
                input.set_array("x", floats(rng, 64));
                input.set_array("y", floats(rng, 64));
            }
            "saxpy" | "saxpy_unrolled" => {
                let n = if self.name == "saxpy" {
                    rng.gen_range(0..=64)
                } else {
                    2 * rng.gen_range(0..=32)
                };
                input.set_int("n", n);
                input.set_array("a", vec![Scalar::Float(rng.gen_range(-4.0..4.0))]);
                input.set_array("x", floats(rng, 64));
                input.set_array("y", floats(rng, 64));
            }
            "stencil" => {
                input.set_int("n", rng.gen_range(0..=64));
                input.set_array("in", floats(rng, 64));
            }
            "gather2d" => {
                input.set_int("n", rng.gen_range(1..=16));
                input.set_int("mzeta", rng.gen_range(1..=4));
                let jtp = (0..128).map(|_| Scalar::Int(rng.gen_range(0..64))).collect();
                input.set_array("jtp", jtp);
                input.set_array("wtp", floats(rng, 136));
                input.set_array("phitmp", floats(rng, 64));
            }
            "pointer_walk" => {
                input.set_int("n", rng.gen_range(1..=64));
                input.set_int("off", rng.gen_range(0..=64));
            }
            "sr_showcase" => {
                input.set_int("n", rng.gen_range(0..=64));
                let x = (0..200)
                    .map(|_| Scalar::Int(rng.gen_range(-1000..=1000)))
                    .collect();
                input.set_array("x", x);
            }
            other => panic!("no input generator for kernel {other}"),
        }
        input
    }
}
