use std::fs;
use std::io::{self, Read};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use super::{Environment, ExecutionJob, Executor, ShimLauncher, SOLUTION_FILE, TESTS_FILE};

const MAX_CAPTURE: usize = 1 << 20;
const POLL_INTERVAL: Duration = Duration::from_millis(5);

pub(super) struct ShimRun {
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
    pub exit_ok: bool,
    pub exit_description: String,
    pub duration: Duration,
}

/// Returns the command prefix that runs a program without network access,
/// if this host supports one.
pub(super) fn probe_network_jail() -> Option<Vec<String>> {
    static JAIL: OnceLock<Option<Vec<String>>> = OnceLock::new();
    JAIL.get_or_init(|| {
        for prefix in [&["unshare", "-n", "--"][..], &["unshare", "-r", "-n", "--"][..]] {
            let ok = Command::new(prefix[0])
                .args(&prefix[1..])
                .arg("true")
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status()
                .is_ok_and(|s| s.success());
            if ok {
                return Some(prefix.iter().map(|s| s.to_string()).collect());
            }
        }
        log::warn!("no network namespace support; network-denied jobs rely on proxy variables only");
        None
    })
    .clone()
}

pub(super) fn run_shim(exec: &Executor, job: &ExecutionJob, env: &Environment) -> io::Result<ShimRun> {
    let workdir = tempfile::Builder::new().prefix("benchgen-job-").tempdir()?;
    let solution = workdir.path().join(SOLUTION_FILE);
    let tests = workdir.path().join(TESTS_FILE);
    fs::write(&solution, &job.program)?;
    fs::write(&tests, &job.test_code)?;

    let mut argv: Vec<String> = Vec::new();
    if !job.network_allowed {
        if let Some(jail) = &exec.network_jail {
            argv.extend(jail.iter().cloned());
        }
    }
    match &exec.shim {
        ShimLauncher::Python { script } => {
            argv.push(env.python.to_string_lossy().into_owned());
            argv.push(script.to_string_lossy().into_owned());
        }
        ShimLauncher::Command { program, args } => {
            argv.push(program.to_string_lossy().into_owned());
            argv.extend(args.iter().cloned());
        }
    }
    argv.push(solution.to_string_lossy().into_owned());
    argv.push(tests.to_string_lossy().into_owned());
    argv.push("--timeout-soft".into());
    argv.push(format!("{}", job.timeout.as_secs_f64()));
    argv.push("--coverage".into());
    argv.push(if job.collect_coverage { "on" } else { "off" }.into());

    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(workdir.path())
        .env_clear()
        .env("PATH", "/usr/local/bin:/usr/bin:/bin")
        .env("HOME", workdir.path())
        .env("TMPDIR", workdir.path())
        .env("LANG", "C.UTF-8")
        .env("PYTHONHASHSEED", "0")
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .env("PYTHONIOENCODING", "utf-8")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    if let Some(site) = &env.site_dir {
        cmd.env("PYTHONPATH", site);
    }
    if !job.network_allowed {
        for var in ["http_proxy", "https_proxy", "HTTP_PROXY", "HTTPS_PROXY", "ALL_PROXY", "all_proxy"] {
            cmd.env(var, "http://127.0.0.1:9");
        }
        cmd.env("NO_PROXY", "").env("no_proxy", "");
    }

    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let pid = child.id() as libc::pid_t;
    let stdout = child.stdout.take().map(spawn_reader);
    let stderr = child.stderr.take().map(spawn_reader);

    let deadline = job.timeout + exec.kill_grace;
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= deadline {
            timed_out = true;
            // SAFETY: kill(2) on the child's own process group; the group id
            // equals the child pid because of `process_group(0)`.
            unsafe {
                libc::killpg(pid, libc::SIGKILL);
            }
            break child.wait()?;
        }
        thread::sleep(POLL_INTERVAL);
    };
    // Reap stragglers that kept the pipes open.
    // SAFETY: as above; the group may already be gone, which is harmless.
    unsafe {
        libc::killpg(pid, libc::SIGKILL);
    }
    let duration = start.elapsed();
    // Temp paths would make otherwise identical reports differ between runs.
    let scrub = |text: String| {
        let prefix = format!("{}/", workdir.path().display());
        text.replace(&prefix, "")
    };
    let stdout = scrub(stdout.map(join_reader).unwrap_or_default());
    let stderr = scrub(stderr.map(join_reader).unwrap_or_default());

    let exit_description = match (status.code(), status.signal()) {
        (Some(code), _) => format!("exit code {code}"),
        (None, Some(sig)) => format!("signal {sig}"),
        _ => "unknown status".to_string(),
    };
    Ok(ShimRun { stdout, stderr, timed_out, exit_ok: status.success(), exit_description, duration })
}

fn spawn_reader<R: Read + Send + 'static>(mut src: R) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut kept: Vec<u8> = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match src.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    kept.extend_from_slice(&buf[..n]);
                    if kept.len() > 2 * MAX_CAPTURE {
                        kept.drain(..kept.len() - MAX_CAPTURE);
                    }
                }
            }
        }
        if kept.len() > MAX_CAPTURE {
            kept.drain(..kept.len() - MAX_CAPTURE);
        }
        String::from_utf8_lossy(&kept).into_owned()
    })
}

fn join_reader(handle: thread::JoinHandle<String>) -> String {
    handle.join().unwrap_or_default()
}
