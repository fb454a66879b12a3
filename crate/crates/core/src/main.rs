fn main() {
    // Die quietly when a downstream pipe closes early (featreg ... | head).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(featreg::cli::main());
}
