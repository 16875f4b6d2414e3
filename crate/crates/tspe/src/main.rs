//! Thin binary wrapper; all logic lives in [`tspe::cli`].

fn main() {
    std::process::exit(tspe::cli::run());
}
