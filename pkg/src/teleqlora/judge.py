"""LLM-as-judge evaluation: rubric prompting, verdict parsing, aggregation.

Candidates are generated deterministically (seeded per sample index), judge
requests go out over a bounded thread pool with retries, and aggregation runs
in sample-index order with exact rational arithmetic so reports are
byte-identical across runs in mock mode.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources

import requests

from .datapipe.samples import ChatSample
from .datapipe.template import prompt_prefix
from .datapipe.tokenizer import detokenize, tokenize
from .model import generate

CRITERIA = ("instruction_following", "linguistic_quality", "technical_accuracy_relevance")

CRITERION_DESCRIPTIONS = {
    "instruction_following": "adherence to the prompt's explicit and implicit constraints",
    "linguistic_quality": "clarity, coherence, grammar, and structural integrity",
    "technical_accuracy_relevance": (
        "correctness of telecom-specific information, terminology, and contextual appropriateness"
    ),
}


class TransportError(RuntimeError):
    pass


class EvalAborted(RuntimeError):
    def __init__(self, message: str, report: "EvalReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class Rubric:
    criteria: tuple[tuple[str, str], ...]
    scale_min: int
    scale_max: int
    system_prompt_template: str

    def __post_init__(self):
        if tuple(name for name, _ in self.criteria) != CRITERIA:
            raise ValueError("rubric must have exactly the three fixed criteria, in order")
        if (self.scale_min, self.scale_max) != (0, 10):
            raise ValueError("scale bounds are fixed at 0 and 10")

    def system_prompt(self) -> str:
        return self.system_prompt_template.format(
            scale_min=self.scale_min, scale_max=self.scale_max
        )


def load_rubric(path=None) -> Rubric:
    """Rubric with the versioned system-prompt template (packaged default if None)."""
    if path is None:
        template = resources.files("teleqlora.data").joinpath("judge_rubric.txt").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            template = fh.read()
    return Rubric(
        criteria=tuple((name, CRITERION_DESCRIPTIONS[name]) for name in CRITERIA),
        scale_min=0,
        scale_max=10,
        system_prompt_template=template,
    )


@dataclass
class JudgeVerdict:
    scores: dict[str, int]
    rationale: str
    raw_response: str


def build_judge_request(prompt: str, candidate: str, reference: str, rubric: Rubric) -> list[dict]:
    """System + user messages for one adjudication; deterministic for fixed inputs."""
    if not prompt or not candidate:
        raise ValueError("prompt and candidate must be non-empty")
    parts = [
        "### User prompt\n```\n" + prompt + "\n```",
        "### Candidate response\n```\n" + candidate + "\n```",
    ]
    if reference:
        parts.append("### Reference response\n```\n" + reference + "\n```")
    else:
        parts.append("### Reference response\n(none available for this sample)")
    return [
        {"role": "system", "content": rubric.system_prompt()},
        {"role": "user", "content": "\n\n".join(parts)},
    ]


def _first_json_object(text: str) -> dict:
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(text[start:])
        except json.JSONDecodeError:
            start = text.find("{", start + 1)
            continue
        if isinstance(obj, dict):
            return obj
        start = text.find("{", start + 1)
    raise ValueError("unparseable verdict")


def parse_verdict(judge_text: str) -> JudgeVerdict:
    """Extract and validate the first JSON object in the judge's reply."""
    obj = _first_json_object(judge_text)
    scores = {}
    for name in CRITERIA:
        if name not in obj:
            raise ValueError(f"incomplete verdict (missing {name})")
        value = obj[name]
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"incomplete verdict (non-integer {name})")
        if not 0 <= value <= 10:
            raise ValueError("out-of-range score")
        scores[name] = value
    return JudgeVerdict(
        scores=scores, rationale=str(obj.get("rationale", "")), raw_response=judge_text
    )


class ChatCompletionsClient:
    """POST {endpoint}/v1/chat/completions with bearer auth, retries, backoff."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        temperature: float = 0.0,
        max_retries: int = 3,
        backoff_s: float = 1.0,
        timeout_s: float = 60.0,
        api_key: str | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.temperature = temperature
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self.api_key = api_key if api_key is not None else os.environ.get("JUDGE_API_KEY")

    def complete(self, messages: list[dict], index: int | None = None) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.model, "messages": messages, "temperature": self.temperature}
        last_error = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            try:
                resp = requests.post(
                    f"{self.endpoint}/v1/chat/completions",
                    json=payload,
                    headers=headers,
                    timeout=self.timeout_s,
                )
            except requests.RequestException as exc:
                last_error = f"request failed: {exc}"
                continue
            if resp.status_code != 200:
                last_error = f"status {resp.status_code}"
                continue
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, LookupError, TypeError) as exc:
                last_error = f"malformed completion payload: {exc}"
                continue
        raise TransportError(f"judge request failed after retries ({last_error})")


class MockJudge:
    """Scripted judge: JSONL file where line i answers sample index i."""

    def __init__(self, path):
        self.responses: list[str] = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                if isinstance(obj, dict) and "content" in obj:
                    self.responses.append(obj["content"])
                else:
                    self.responses.append(json.dumps(obj))

    def complete(self, messages: list[dict], index: int | None = None) -> str:
        if index is None or index >= len(self.responses):
            raise TransportError(f"no scripted verdict for sample index {index}")
        return self.responses[index]


@dataclass
class EvalRunConfig:
    temperature: float = 0.7
    top_p: float = 0.9
    max_new: int = 64
    seed: int = 0
    concurrency: int = 4
    abort_failure_frac: float = 0.5


class InProcessCandidate:
    """Serves the local model as the candidate endpoint (seeded per index)."""

    def __init__(self, model, run_cfg: EvalRunConfig):
        self.model = model
        self.run_cfg = run_cfg

    def __call__(self, sample: ChatSample, index: int) -> str:
        prompt_ids = tokenize(prompt_prefix(sample.input))
        max_prompt = self.model.cfg.max_seq - self.run_cfg.max_new
        prompt_ids = prompt_ids[-max(1, max_prompt):]
        out = generate(
            self.model,
            prompt_ids,
            self.run_cfg.temperature,
            self.run_cfg.top_p,
            self.run_cfg.max_new,
            seed=self.run_cfg.seed + index,
        )
        text = detokenize(out)
        return text if text.strip() else "(empty response)"


@dataclass
class EvalReport:
    per_category: dict = field(default_factory=dict)
    overall: dict = field(default_factory=dict)
    evaluated: int = 0
    total: int = 0
    failures: list = field(default_factory=list)
    aborted: bool = False

    def to_dict(self) -> dict:
        return {
            "per_category": self.per_category,
            "overall": self.overall,
            "evaluated": self.evaluated,
            "total": self.total,
            "failures": self.failures,
            "aborted": self.aborted,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def render_table(self) -> str:
        short = {
            "instruction_following": "instr",
            "linguistic_quality": "lang",
            "technical_accuracy_relevance": "tech",
        }
        header = f"{'category':<28} {'n':>4} " + " ".join(f"{short[c]:>6}" for c in CRITERIA)
        lines = [header, "-" * len(header)]
        for cat in sorted(self.per_category):
            entry = self.per_category[cat]
            row = f"{cat:<28} {entry['count']:>4} " + " ".join(
                f"{entry['means'][c]:>6.2f}" for c in CRITERIA
            )
            lines.append(row)
        if self.overall:
            lines.append("-" * len(header))
            lines.append(
                f"{'overall':<28} {self.evaluated:>4} "
                + " ".join(f"{self.overall[c]:>6.2f}" for c in CRITERIA)
            )
        lines.append(f"failures: {len(self.failures)}   aborted: {self.aborted}")
        return "\n".join(lines)


def evaluate_set(
    test_set: list[ChatSample],
    candidate,
    judge,
    rubric: Rubric,
    run_cfg: EvalRunConfig | None = None,
) -> EvalReport:
    """Generate, adjudicate, and aggregate; never silently drops a failure.

    Raises EvalAborted (carrying the partial report) when transport failures
    exceed the configured fraction of the test set.
    """
    if not test_set:
        raise ValueError("empty test set")
    run_cfg = run_cfg or EvalRunConfig()
    report = EvalReport(total=len(test_set))

    candidates: list[str | None] = []
    for i, sample in enumerate(test_set):
        try:
            candidates.append(candidate(sample, i))
        except (TransportError, requests.RequestException) as exc:
            candidates.append(None)
            report.failures.append(
                {"index": i, "category": sample.category, "kind": "transport", "error": str(exc)}
            )

    def ask(i: int):
        if candidates[i] is None:
            return None
        messages = build_judge_request(
            test_set[i].input, candidates[i], test_set[i].output, rubric
        )
        return judge.complete(messages, index=i)

    replies: list = [None] * len(test_set)
    with ThreadPoolExecutor(max_workers=run_cfg.concurrency) as pool:
        futures = {i: pool.submit(ask, i) for i in range(len(test_set)) if candidates[i] is not None}
    for i in sorted(futures):
        try:
            replies[i] = futures[i].result()
        except TransportError as exc:
            report.failures.append(
                {
                    "index": i,
                    "category": test_set[i].category,
                    "kind": "transport",
                    "error": str(exc),
                }
            )

    transport_failures = sum(1 for f in report.failures if f["kind"] == "transport")
    if transport_failures > run_cfg.abort_failure_frac * len(test_set):
        report.aborted = True
        _aggregate(report, test_set, replies)
        raise EvalAborted(
            f"{transport_failures}/{len(test_set)} transport failures", report
        )

    _aggregate(report, test_set, replies)
    return report


def _aggregate(report: EvalReport, test_set: list[ChatSample], replies: list):
    sums: dict[str, dict[str, Fraction]] = {}
    counts: dict[str, int] = {}
    overall = {name: Fraction(0) for name in CRITERIA}
    evaluated = 0
    for i, (sample, reply) in enumerate(zip(test_set, replies)):
        if reply is None:
            continue
        try:
            verdict = parse_verdict(reply)
        except ValueError as exc:
            report.failures.append(
                {"index": i, "category": sample.category, "kind": "verdict", "error": str(exc)}
            )
            continue
        evaluated += 1
        counts[sample.category] = counts.get(sample.category, 0) + 1
        cat = sums.setdefault(sample.category, {name: Fraction(0) for name in CRITERIA})
        for name in CRITERIA:
            cat[name] += verdict.scores[name]
            overall[name] += verdict.scores[name]

    report.evaluated = evaluated
    report.per_category = {
        slug: {
            "count": counts[slug],
            "means": {name: float(sums[slug][name] / counts[slug]) for name in CRITERIA},
        }
        for slug in sums
    }
    if evaluated:
        report.overall = {name: float(overall[name] / evaluated) for name in CRITERIA}
