// SPDX-License-Identifier: Apache-2.0

fn main() -> std::process::ExitCode {
    edge_core::cli::run(std::env::args_os())
}
