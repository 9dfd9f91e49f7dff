//! Runs the Rust listings of the guide in `book/src` as doctests.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(model, "model.md");
chapter!(kernel, "kernel.md");
chapter!(value_iteration, "value_iteration.md");
chapter!(folding, "folding.md");
chapter!(thresholds, "thresholds.md");
chapter!(simulation, "simulation.md");
chapter!(cli, "cli.md");
