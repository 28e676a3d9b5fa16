fn main() -> std::process::ExitCode {
    mq_bench::cli::main()
}
