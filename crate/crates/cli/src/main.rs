use std::process::ExitCode;

use circuitforge::alloc::TrackingAllocator;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

fn main() -> ExitCode {
    circuitforge_cli::main_with_args(std::env::args_os())
}
