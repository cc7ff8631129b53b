import argparse
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence, Tuple

from bup.cli import parse_seeds

PYTHON_BIN = os.getenv("PYTHON_BIN", sys.executable or "python3")
CLI_MODULE = "bup.cli"


class SeedRunError(RuntimeError):
    def __init__(self, seed: int, returncode: int, stdout: str, stderr: str) -> None:
        super().__init__(f"seed {seed}: bup.cli exited with {returncode}. stdout:\n{stdout}\n\nstderr:\n{stderr}")
        self.seed = seed
        self.returncode = returncode


def _command(command: str, seed: int, config_path: Optional[str], extra_args: Sequence[str]) -> List[str]:
    args = [PYTHON_BIN, "-m", CLI_MODULE, command, "--seeds", str(seed), "--no-progress"]
    if config_path:
        args.extend(["--config", config_path])
    args.extend(extra_args)
    return args


def run_seed(
    seed: int,
    *,
    command: str = "train",
    config_path: Optional[str] = None,
    extra_args: Sequence[str] = (),
) -> Tuple[str, str]:
    env = {**os.environ, "PYTHONUNBUFFERED": "1"}
    try:
        completed = subprocess.run(
            _command(command, seed, config_path, extra_args),
            check=True,
            capture_output=True,
            text=True,
            env=env,
        )
        return completed.stdout or "", completed.stderr or ""
    except subprocess.CalledProcessError as exc:
        raise SeedRunError(seed, exc.returncode, exc.stdout or "", exc.stderr or "") from exc


def run(
    seeds: Sequence[int],
    *,
    command: str = "train",
    config_path: Optional[str] = None,
    extra_args: Sequence[str] = (),
    max_workers: Optional[int] = None,
) -> Dict[int, Tuple[str, str]]:
    """Run one ``bup.cli`` process per seed; every seed's run is independent and deterministic."""
    workers = max(1, max_workers or min(len(seeds), os.cpu_count() or 1))
    results: Dict[int, Tuple[str, str]] = {}
    failures: List[SeedRunError] = []
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {
            executor.submit(run_seed, seed, command=command, config_path=config_path, extra_args=extra_args): seed
            for seed in seeds
        }
        for future in as_completed(futures):
            try:
                results[futures[future]] = future.result()
            except SeedRunError as exc:
                failures.append(exc)
    if failures:
        failures.sort(key=lambda exc: exc.seed)
        raise failures[0]
    return dict(sorted(results.items()))


def describe_success(results: Dict[int, Tuple[str, str]]) -> str:
    timestamp = datetime.now(timezone.utc).isoformat()
    seeds = ",".join(str(seed) for seed in results)
    last_lines = []
    for seed, (_, stderr) in results.items():
        lines = stderr.strip().splitlines()
        if lines:
            last_lines.append(f"seed {seed}: {lines[-1]}")
    detail = "\n".join(last_lines) if last_lines else "bup.cli finished."
    return f"[{timestamp}] seeds {seeds}\n{detail}"


def main() -> int:
    parser = argparse.ArgumentParser(description="Run bup.cli once per seed in parallel processes.")
    parser.add_argument("--seeds", default="0-9", help="Comma list or ranges, e.g. 0-9")
    parser.add_argument("--command", default="train", choices=("train", "ood"))
    parser.add_argument("--config", default=os.getenv("BUP_CONFIG"))
    parser.add_argument("--max-workers", type=int, default=None)
    args, extra = parser.parse_known_args()

    try:
        results = run(
            parse_seeds(args.seeds),
            command=args.command,
            config_path=args.config,
            extra_args=extra,
            max_workers=args.max_workers,
        )
    except SeedRunError as exc:
        print(str(exc), file=sys.stderr)
        return exc.returncode
    print(describe_success(results))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
