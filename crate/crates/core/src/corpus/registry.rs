//! Compiled-in benchmark problem definitions.
//!
//! Each entry records the ground-truth equation (prefix text), the dataset
//! sampling domain, and the token library the search is restricted to.
//! Domains are `U(a,b,c)` (uniform, independent train/test draws) or
//! `E(a,b,c)` (evenly spaced, shared train/test points), applied per
//! variable.

use super::ProblemSpec;
use crate::expr::ExprTree;
use crate::grammar::LibrarySpec;

/// (name, ground-truth prefix text, domain notation, library name)
const PROBLEMS: &[(&str, &str, &str, &str)] = &[
    // Polynomial / trigonometric standards.
    ("Nguyen-1", "add add pow3 x1 pow2 x1 x1", "U(-1,1,20)", "koza-d1"),
    ("Nguyen-2", "add add add pow4 x1 pow3 x1 pow2 x1 x1", "U(-1,1,20)", "koza-d1"),
    ("Nguyen-3", "add add add add pow5 x1 pow4 x1 pow3 x1 pow2 x1 x1", "U(-1,1,20)", "koza-d1"),
    ("Nguyen-4", "add add add add add pow x1 6 pow5 x1 pow4 x1 pow3 x1 pow2 x1 x1", "U(-1,1,20)", "koza-d1"),
    ("Nguyen-5", "sub mul sin pow2 x1 cos x1 1", "U(-1,1,20)", "koza-d1"),
    ("Nguyen-6", "add sin x1 sin add x1 pow2 x1", "U(-1,1,20)", "koza-d1"),
    ("Nguyen-7", "add log add x1 1 log add pow2 x1 1", "U(0,2,20)", "koza-d1"),
    ("Nguyen-8", "sqrt x1", "U(0,4,20)", "koza-d1"),
    ("Nguyen-9", "add sin x1 sin pow2 x2", "U(0,1,20)", "koza-d2"),
    ("Nguyen-10", "mul 2 mul sin x1 cos x2", "U(0,1,20)", "koza-d2"),
    ("Nguyen-11", "pow x1 x2", "U(0,1,20)", "koza-d2"),
    ("Nguyen-12", "sub add sub pow4 x1 pow3 x1 mul 1/2 pow2 x2 x2", "U(0,1,20)", "koza-d2"),
    // Variants with arbitrary numeric constants.
    ("Nguyen-1c", "add add mul 3.39 pow3 x1 mul 2.12 pow2 x1 mul 1.78 x1", "U(-1,1,20)", "koza-const-d1"),
    ("Nguyen-5c", "sub mul sin pow2 x1 cos x1 0.75", "U(-1,1,20)", "koza-const-d1"),
    ("Nguyen-7c", "add log add x1 1.4 log add pow2 x1 1.3", "U(0,2,20)", "koza-const-d1"),
    ("Nguyen-8c", "sqrt mul 1.23 x1", "U(0,4,20)", "koza-const-d1"),
    ("Nguyen-10c", "mul sin mul 1.5 x1 cos mul 0.5 x2", "U(0,1,20)", "koza-const-d2"),
    // Rational functions on a shared grid, at two domain scales.
    ("R-1", "div pow3 add x1 1 add sub pow2 x1 x1 1", "E(-1,1,20)", "koza-d1"),
    ("R-2", "div add sub pow5 x1 mul 3 pow3 x1 1 add pow2 x1 1", "E(-1,1,20)", "koza-d1"),
    ("R-3", "div add pow x1 6 pow5 x1 add add add add pow4 x1 pow3 x1 pow2 x1 x1 1", "E(-1,1,20)", "koza-d1"),
    ("R-1*", "div pow3 add x1 1 add sub pow2 x1 x1 1", "E(-10,10,20)", "koza-d1"),
    ("R-2*", "div add sub pow5 x1 mul 3 pow3 x1 1 add pow2 x1 1", "E(-10,10,20)", "koza-d1"),
    ("R-3*", "div add pow x1 6 pow5 x1 add add add add pow4 x1 pow3 x1 pow2 x1 x1 1", "E(-10,10,20)", "koza-d1"),
    ("Livermore-1", "add add 1/3 x1 sin pow2 x1", "U(-10,10,1000)", "koza-d1"),
    ("Livermore-2", "sub mul sin pow2 x1 cos x1 2", "U(-1,1,20)", "koza-d1"),
    ("Livermore-3", "sub mul sin pow3 x1 cos pow2 x1 1", "U(-1,1,20)", "koza-d1"),
    ("Livermore-4", "add add log add x1 1 log add pow2 x1 1 log x1", "U(0,2,20)", "koza-d1"),
    ("Livermore-5", "sub add sub pow4 x1 pow3 x1 pow2 x1 x2", "U(0,1,20)", "koza-d2"),
    ("Livermore-6", "add add add mul 4 pow4 x1 mul 3 pow3 x1 mul 2 pow2 x1 x1", "U(-1,1,20)", "koza-d1"),
    ("Livermore-7", "div sub exp x1 exp mul -1 x1 2", "U(-1,1,20)", "koza-d1"),
    ("Livermore-8", "div add exp x1 exp mul -1 x1 2", "U(-1,1,20)", "koza-d1"),
    ("Livermore-9", "add add add add add add add add pow x1 9 pow x1 8 pow x1 7 pow x1 6 pow5 x1 pow4 x1 pow3 x1 pow2 x1 x1", "U(-1,1,20)", "koza-d1"),
    ("Livermore-10", "mul 6 mul sin x1 cos x2", "U(0,1,20)", "koza-d2"),
    ("Livermore-11", "div mul pow2 x1 pow2 x1 add x1 x2", "U(-1,1,50)", "koza-d2"),
    ("Livermore-12", "div pow5 x1 pow3 x2", "U(-1,1,50)", "koza-d2"),
    ("Livermore-13", "pow x1 1/3", "U(0,4,20)", "koza-d1"),
    ("Livermore-14", "add add add add pow3 x1 pow2 x1 x1 sin x1 sin pow2 x1", "U(-1,1,20)", "koza-d1"),
    ("Livermore-15", "pow x1 1/5", "U(0,4,20)", "koza-d1"),
    ("Livermore-16", "pow x1 2/5", "U(0,4,20)", "koza-d1"),
    ("Livermore-17", "mul 4 mul sin x1 cos x2", "U(0,1,20)", "koza-d2"),
    ("Livermore-18", "sub mul sin pow2 x1 cos x1 5", "U(-1,1,20)", "koza-d1"),
    ("Livermore-19", "add add add pow5 x1 pow4 x1 pow2 x1 x1", "U(-1,1,20)", "koza-d1"),
    ("Livermore-20", "exp mul -1 pow2 x1", "U(-1,1,20)", "koza-d1"),
    ("Livermore-21", "add add add add add add add pow x1 8 pow x1 7 pow x1 6 pow5 x1 pow4 x1 pow3 x1 pow2 x1 x1", "U(-1,1,20)", "koza-d1"),
    ("Livermore-22", "exp mul -0.5 pow2 x1", "U(-1,1,20)", "koza-d1"),
    // Physics equations, low-dimensional set.
    ("Feynman-1", "mul x1 x2", "U(1,5,20)", "koza-d2"),
    ("Feynman-2", "div x1 mul 2 add 1 x2", "U(1,5,20)", "koza-d2"),
    ("Feynman-3", "mul x1 pow2 x2", "U(1,5,20)", "koza-d2"),
    ("Feynman-4", "add 1 div mul x1 x2 sub 1 div mul x1 x2 3", "U(0,1,20)", "koza-d2"),
    ("Feynman-5", "div x1 x2", "U(1,5,20)", "koza-d2"),
    ("Feynman-6", "mul 1/2 mul x1 pow2 x2", "U(1,5,20)", "koza-d2"),
    ("Feynman-7", "mul 3/2 mul x1 x2", "U(1,5,20)", "koza-d2"),
    // Physics equations, five-variable set.
    ("Feynman-8", "div x1 add exp div mul x4 x5 mul x2 x3 exp mul -1 div mul x4 x5 mul x2 x3", "U(1,3,50)", "koza-d5"),
    ("Feynman-9", "mul mul mul x1 x2 x3 log div x5 x4", "U(1,5,50)", "koza-d5"),
    ("Feynman-10", "div mul mul x1 sub x3 x2 x4 x5", "U(1,5,50)", "koza-d5"),
    ("Feynman-11", "div mul x1 x2 mul x5 sub pow2 x3 pow2 x4", "U(1,3,50)", "koza-d5"),
    ("Feynman-12", "div mul mul x1 pow2 x2 x3 mul 3 mul x4 x5", "U(1,5,50)", "koza-d5"),
    ("Feynman-13", "mul x1 sub exp div mul x2 x3 mul x4 x5 1", "U(1,5,50)", "koza-d5"),
    ("Feynman-14", "mul mul mul x5 x1 x2 sub div 1 x4 div 1 x3", "U(1,5,50)", "koza-d5"),
    ("Feynman-15", "mul x1 add x2 mul mul x3 x4 sin x5", "U(1,5,50)", "koza-d5"),
    // Physics equations, extended set.
    ("Feynman-A-1", "div mul mul x3 x1 x2 add add pow2 sub x5 x4 pow2 sub x7 x6 pow2 sub x9 x8", "U(1,2,90)", "koza-d9"),
    ("Feynman-A-2", "add div mul x1 x2 mul x3 x4 mul div mul x1 x5 mul mul mul x6 pow2 x7 x3 x4 x8", "U(1,3,80)", "koza-d8"),
    ("Feynman-A-3", "mul x1 exp div mul mul mul -1 x2 x5 x3 mul x6 x4", "U(1,5,60)", "koza-d6"),
    ("Feynman-A-4", "add add mul x1 x4 mul x2 x5 mul x3 x6", "U(1,5,60)", "koza-d6"),
    ("Feynman-A-5", "mul x1 add 1 div mul mul x5 x6 cos x4 mul x2 x3", "U(1,3,60)", "koza-d6"),
    ("Feynman-A-6", "mul mul x1 add 1 x3 x2", "U(1,5,60)", "koza-d6"),
    ("Feynman-A-7", "div mul mul x1 x4 x2 x3", "U(1,5,40)", "koza-d4"),
    ("Feynman-A-8", "div mul mul x1 x2 x3 x4", "U(1,5,40)", "koza-d4"),
    ("Feynman-A-9", "mul mul div 1 sub x1 1 x2 div x4 x3", "U(2,5,40)", "koza-d4"),
    ("Feynman-A-10", "div mul mul x1 x2 x3 mul 2 x4", "U(1,5,40)", "koza-d4"),
    ("Feynman-A-11", "div mul mul x1 x2 x4 x3", "U(1,5,40)", "koza-d4"),
    ("Feynman-A-12", "mul x1 add cos mul x2 x3 mul x4 pow2 cos mul x2 x3", "U(1,3,40)", "koza-d4"),
    ("Feynman-A-13", "mul -1 mul mul x1 x2 div x3 x4", "U(1,5,40)", "koza-d4"),
    ("Feynman-A-14", "div add mul x1 x3 mul x2 x4 add x1 x2", "U(1,5,40)", "koza-d4"),
    ("Feynman-A-15", "mul 1/2 mul x1 add add pow2 x2 pow2 x3 pow2 x4", "U(1,5,40)", "koza-d4"),
    ("Feynman-A-16", "mul -1 mul mul x1 x2 cos x3", "U(1,5,30)", "koza-d3"),
    ("Feynman-A-17", "div add x3 x2 add 1 div mul x3 x2 pow2 x1", "U(1,5,30)", "koza-d3"),
    ("Feynman-A-18", "mul mul x1 x2 x3", "U(1,5,30)", "koza-d3"),
    ("Feynman-A-19", "mul mul x1 x2 pow2 x3", "U(1,5,30)", "koza-d3"),
    ("Feynman-A-20", "div mul mul x1 x2 x3 2", "U(1,5,30)", "koza-d3"),
    ("Feynman-A-21", "mul mul div 1 sub x1 1 x2 x3", "U(2,5,30)", "koza-d3"),
    ("Feynman-A-22", "div x3 sub 1 div x2 x1", "U(3,10,30)", "koza-d3"),
    ("Feynman-A-23", "mul mul x1 x3 x2", "U(1,5,30)", "koza-d3"),
    ("Feynman-A-24", "div mul x1 pow2 sin mul x3 div x2 2 pow2 sin div x2 2", "U(1,5,30)", "koza-d3"),
    ("Feynman-A-25", "mul x1 add 1 mul x2 cos x3", "U(1,5,30)", "koza-d3"),
    ("Feynman-A-26", "div 1 add div 1 x1 div x3 x2", "U(1,5,30)", "koza-d3"),
    ("Feynman-A-27", "mul 2 mul x1 sub 1 cos mul x2 x3", "U(1,5,30)", "koza-d3"),
    ("Feynman-A-28", "div x1 mul x2 add 1 x3", "U(1,5,30)", "koza-d3"),
    ("Feynman-A-29", "pow2 div mul mul mul mul x1 x2 x3 x4 x5 mul mul 4 x6 pow2 sin div x7 2", "U(1,2,70)", "koza-d7"),
    ("Feynman-A-30", "div x1 add 1 mul div x1 mul x2 pow2 x3 sub 1 cos x4", "U(1,3,40)", "koza-d4"),
    ("Feynman-A-31", "div mul x1 sub 1 pow2 x2 add 1 mul x2 cos sub x3 x4", "U(1,3,40)", "koza-d4"),
    ("Feynman-A-32", "mul x1 pow2 div mul sin div x2 2 sin div mul x4 x3 2 mul div x2 2 sin div x3 2", "U(4,6,40)", "koza-d4"),
    // Sparse-sum problems over twelve variables, arithmetic library only.
    ("Synthetic-1", "add add add add add add add add x12 mul x9 add x10 x11 x1 x2 x3 x4 x5 x6 mul x7 x8", "U(-1,1,120)", "synth-d12"),
    ("Synthetic-2", "add add add add add add add add x10 x11 x12 mul x3 add x1 x2 mul x4 x5 x6 x7 x8 x9", "U(-1,1,120)", "synth-d12"),
    ("Synthetic-3", "add add add x10 mul x9 add add add add add add add x1 x2 x3 x4 x5 x6 x7 x8 x11 x12", "U(-1,1,120)", "synth-d12"),
    ("Synthetic-4", "add add add add sub mul x8 add x6 x7 mul add add x10 mul x11 x12 x9 x1 x2 x3 x4 x5", "U(-1,1,120)", "synth-d12"),
    ("Synthetic-5", "add add add add add sub add add add x10 x11 x12 mul x9 add x1 x2 x3 x4 x5 x6 x7 x8", "U(-1,1,120)", "synth-d12"),
    ("Synthetic-6", "add add add add add add add add sub mul x1 sub x10 x11 x12 x2 x3 x4 x5 x6 x7 x8 x9", "U(-1,1,120)", "synth-d12"),
    ("Synthetic-7", "add add add add sub add sub mul x1 x2 mul x11 add add mul -1 x10 x6 x7 x8 x9 x12 x3 x4 x5", "U(-1,1,120)", "synth-d12"),
];

/// All built-in benchmark problems, in definition order.
pub fn registry() -> Vec<ProblemSpec> {
    PROBLEMS
        .iter()
        .map(|&(name, prefix, domain, lib)| ProblemSpec {
            name: name.to_string(),
            ground_truth: Some(
                ExprTree::parse_prefix_text(prefix)
                    .unwrap_or_else(|e| panic!("registry entry {name}: {e}"))
                    .to_prefix_tokens(),
            ),
            library: LibrarySpec::by_name(lib)
                .unwrap_or_else(|| panic!("registry entry {name}: unknown library {lib}")),
            domain: domain
                .parse()
                .unwrap_or_else(|e| panic!("registry entry {name}: {e}")),
        })
        .collect()
}

/// Looks up one benchmark problem by name.
pub fn problem(name: &str) -> Option<ProblemSpec> {
    registry().into_iter().find(|p| p.name == name)
}
