/// A closed output pipe (say `hiergrain ablate | head`) must end the
/// process quietly; the Rust runtime masks SIGPIPE, which turns the
/// closed pipe into a write-error panic instead.
#[cfg(unix)]
fn restore_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn restore_sigpipe() {}

fn main() {
    restore_sigpipe();
    std::process::exit(hiergrain::cli::run());
}
