"""Sandboxed execution of solution programs, answer parsing and metrics."""

from __future__ import annotations

import enum
import math
import os
import re
import shlex
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import Candidate, Problem, StageKind, derive_seed
from .exceptions import EmptyBatch, WrongStage

OUTPUT_CAP = 1 << 20  # bytes kept per stream
KILL_GRACE = 1.0

_SENTINEL = re.compile(r"^\s*Optimal value:\s*(\S+)", re.MULTILINE)
_FENCE = re.compile(r"```[ \t]*(?:python|py)?[ \t]*\n(.*?)```", re.DOTALL)


class ExecStatus(str, enum.Enum):
    OK = "ok"
    RUNTIME_ERROR = "runtime_error"
    TIMEOUT = "timeout"
    SPAWN_ERROR = "spawn_error"


class Verdict(str, enum.Enum):
    VERIFIED = "verified"
    MISMATCH = "mismatch"
    NOT_EXECUTED = "not_executed"
    NO_GROUND_TRUTH = "no_ground_truth"


@dataclass(frozen=True)
class ExecutionRecord:
    candidate_id: str
    status: ExecStatus
    stdout: str = ""
    stderr: str = ""
    wall_time: float = 0.0
    parsed_answer: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "status", ExecStatus(self.status))
        if self.parsed_answer is not None and self.status is not ExecStatus.OK:
            raise ValueError("parsed_answer requires status ok")

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "status": self.status.value,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "wall_time": self.wall_time,
            "parsed_answer": self.parsed_answer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutionRecord":
        return cls(**d)


@dataclass(frozen=True)
class VerificationOutcome:
    candidate_id: str
    verdict: Verdict
    has_ground_truth: bool = True
    answer: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "verdict", Verdict(self.verdict))

    @property
    def executed(self) -> bool:
        return self.verdict is not Verdict.NOT_EXECUTED

    @property
    def verified(self) -> bool:
        return self.verdict is Verdict.VERIFIED

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "verdict": self.verdict.value,
            "has_ground_truth": self.has_ground_truth,
            "answer": self.answer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationOutcome":
        return cls(**d)


@dataclass(frozen=True)
class MetricsReport:
    er: float
    sa: float
    counts: dict = field(default_factory=dict)
    n_total: int = 0
    n_with_ground_truth: int = 0

    def to_dict(self) -> dict:
        return {
            "er": self.er,
            "sa": self.sa,
            "counts": dict(self.counts),
            "n_total": self.n_total,
            "n_with_ground_truth": self.n_with_ground_truth,
        }


@dataclass(frozen=True)
class ExecutionLimits:
    timeout: float = 10.0
    interpreter_cmd: str = "python3"
    keep_sandbox: bool = False
    sandbox_root: str | None = None


def _to_real(token: str) -> float | None:
    token = token.strip().strip(",;:()[]'\"").rstrip(".")
    try:
        value = float(token)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def parse_answer(stdout: str) -> float | None:
    """Number on the last ``Optimal value:`` line, else the last real token."""
    for match in reversed(_SENTINEL.findall(stdout)):
        value = _to_real(match)
        if value is not None:
            return value
    for token in reversed(stdout.split()):
        value = _to_real(token)
        if value is not None:
            return value
    return None


def extract_program(body: str) -> str:
    """Strip a markdown code fence if the body is wrapped in one."""
    m = _FENCE.search(body)
    return m.group(1) if m else body


def _drain(stream, sink: bytearray):
    while True:
        chunk = stream.read(65536)
        if not chunk:
            break
        room = OUTPUT_CAP - len(sink)
        if room > 0:
            sink.extend(chunk[:room])
    stream.close()


def _kill_group(proc):
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


def execute_candidate(cand: Candidate, limits: ExecutionLimits = ExecutionLimits()) -> ExecutionRecord:
    """Run a solution program in a fresh temporary directory.

    The program is written to ``solution.py`` and its path is appended to the
    interpreter command. The whole process group is killed at the timeout.
    """
    if cand.stage is not StageKind.SOLUTION:
        raise WrongStage(f"{cand.id} is a {cand.stage.value} candidate, not a solution")
    workdir = tempfile.mkdtemp(prefix="stagewise-", dir=limits.sandbox_root)
    script = os.path.join(workdir, "solution.py")
    with open(script, "w", encoding="utf-8") as fh:
        fh.write(extract_program(cand.body))
    argv = shlex.split(limits.interpreter_cmd) + [script]
    start = time.monotonic()
    try:
        try:
            proc = subprocess.Popen(
                argv,
                cwd=workdir,
                stdin=subprocess.DEVNULL,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                start_new_session=True,
            )
        except OSError as exc:
            return ExecutionRecord(cand.id, ExecStatus.SPAWN_ERROR, stderr=f"{type(exc).__name__}: {exc}",
                                   wall_time=time.monotonic() - start)
        out, err = bytearray(), bytearray()
        readers = [
            threading.Thread(target=_drain, args=(proc.stdout, out), daemon=True),
            threading.Thread(target=_drain, args=(proc.stderr, err), daemon=True),
        ]
        for t in readers:
            t.start()
        timed_out = False
        try:
            proc.wait(timeout=limits.timeout)
        except subprocess.TimeoutExpired:
            timed_out = True
            _kill_group(proc)
            proc.wait()
        for t in readers:
            t.join(timeout=KILL_GRACE / 2)
        wall = time.monotonic() - start
    finally:
        if not limits.keep_sandbox:
            shutil.rmtree(workdir, ignore_errors=True)
    stdout = out.decode("utf-8", errors="replace")
    stderr = err.decode("utf-8", errors="replace")
    if timed_out:
        return ExecutionRecord(cand.id, ExecStatus.TIMEOUT, stdout, stderr, wall)
    if proc.returncode != 0:
        return ExecutionRecord(cand.id, ExecStatus.RUNTIME_ERROR, stdout, stderr, wall)
    return ExecutionRecord(cand.id, ExecStatus.OK, stdout, stderr, wall, parse_answer(stdout))


def verify(problem: Problem, record: ExecutionRecord) -> VerificationOutcome:
    has_gt = problem.ground_truth is not None
    if record.status is not ExecStatus.OK or record.parsed_answer is None:
        return VerificationOutcome(record.candidate_id, Verdict.NOT_EXECUTED, has_gt)
    answer = record.parsed_answer
    if not has_gt:
        return VerificationOutcome(record.candidate_id, Verdict.NO_GROUND_TRUTH, False, answer)
    gt = problem.ground_truth
    tol = max(problem.abs_tolerance, problem.rel_tolerance * abs(gt))
    verdict = Verdict.VERIFIED if abs(answer - gt) <= tol else Verdict.MISMATCH
    return VerificationOutcome(record.candidate_id, verdict, True, answer)


def compute_metrics(outcomes) -> MetricsReport:
    """ER over all outcomes; SA over the outcomes whose problem has ground truth."""
    outcomes = list(outcomes)
    if not outcomes:
        raise EmptyBatch("no outcomes to summarize")
    counts = Counter(o.verdict.value for o in outcomes)
    executed = sum(o.executed for o in outcomes)
    with_gt = sum(o.has_ground_truth for o in outcomes)
    verified = counts.get(Verdict.VERIFIED.value, 0)
    return MetricsReport(
        er=executed / len(outcomes),
        sa=verified / with_gt if with_gt else 0.0,
        counts={v.value: counts.get(v.value, 0) for v in Verdict},
        n_total=len(outcomes),
        n_with_ground_truth=with_gt,
    )


# -- executors used by the pipeline ----------------------------------------


class SubprocessExecutor:
    """Runs the real program; the formulation argument is unused."""

    def __init__(self, limits: ExecutionLimits = ExecutionLimits()):
        self.limits = limits

    def __call__(self, problem: Problem, formulation: Candidate, cand: Candidate) -> ExecutionRecord:
        return execute_candidate(cand, self.limits)


class SyntheticExecutor:
    """Simulated execution for synthetic-world candidates.

    With u a uniform draw keyed by ``(seed, candidate id)`` and p the
    candidate's success probability: u < p prints the ground truth,
    p <= u < sqrt(p) prints a wrong value, otherwise the run crashes.
    Verified runs are therefore always a subset of executed runs.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, problem: Problem, formulation: Candidate, cand: Candidate) -> ExecutionRecord:
        if cand.latent_quality is None:
            raise ValueError(f"{cand.id} has no latent quality; not a synthetic candidate")
        u = np.random.default_rng(derive_seed(self.seed, "exec", cand.id)).random()
        p = cand.latent_quality
        gt = problem.ground_truth if problem.ground_truth is not None else 0.0
        if u < p:
            stdout = f"Optimal value: {gt!r}\n"
        elif u < math.sqrt(p):
            stdout = f"Optimal value: {gt + max(1.0, abs(gt))!r}\n"
        else:
            stderr = (
                "Traceback (most recent call last):\n"
                '  File "solution.py", line 3, in <module>\n'
                "NameError: name 'objective' is not defined\n"
            )
            return ExecutionRecord(cand.id, ExecStatus.RUNTIME_ERROR, "", stderr, 0.0)
        return ExecutionRecord(cand.id, ExecStatus.OK, stdout, "", 0.0, parse_answer(stdout))


def execute_many(executor, jobs, parallelism: int = 1) -> list[ExecutionRecord]:
    """Run ``executor(problem, formulation, cand)`` over jobs, keeping job order."""
    jobs = list(jobs)
    if parallelism > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=min(parallelism, len(jobs))) as pool:
            return list(pool.map(lambda job: executor(*job), jobs))
    return [executor(*job) for job in jobs]
