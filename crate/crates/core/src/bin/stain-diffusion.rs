fn main() -> std::process::ExitCode {
    stain_diffusion::cli::main()
}
