fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("CATSG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // Candle's CPU kernels size their pools from this variable.
            std::env::set_var("RAYON_NUM_THREADS", n.to_string());
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    std::process::exit(catsg::cli::main_with_args(std::env::args().collect()));
}
