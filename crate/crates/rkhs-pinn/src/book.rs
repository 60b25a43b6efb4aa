//! Compiles every code block in the guide (`book/`) as a doc-test, so the
//! prose and the library cannot drift apart. Each chapter is attached to an
//! empty module; `cargo test --doc` then runs its snippets.

macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!($path)]
        mod $name {}
    };
}

chapter!(introduction, "../../../book/src/introduction.md");
chapter!(kernels, "../../../book/src/kernels.md");
chapter!(packets, "../../../book/src/packets.md");
chapter!(tensor_grids, "../../../book/src/tensor-grids.md");
chapter!(jets_and_tapes, "../../../book/src/jets-and-tapes.md");
chapter!(losses, "../../../book/src/losses.md");
chapter!(training, "../../../book/src/training.md");
chapter!(benchmarks, "../../../book/src/benchmarks.md");
