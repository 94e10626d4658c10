"""External realism-judge client: prompt bundle, response parser, archive and replay."""
from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np
from PIL import Image

from .stats import bootstrap_ci

log = logging.getLogger(__name__)

ENV_URL = "LMA_JUDGE_URL"
ENV_KEY = "LMA_JUDGE_API_KEY"
ENV_MODEL = "LMA_JUDGE_MODEL"


@dataclass(frozen=True)
class PromptBundle:
    system: str
    user: str

    @classmethod
    def vendored(cls) -> "PromptBundle":
        pkg = resources.files(__package__) / "judge_prompts"
        return cls((pkg / "system.txt").read_text(encoding="utf-8"), (pkg / "user.txt").read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256((self.system + "\x00" + self.user).encode("utf-8")).hexdigest()


@dataclass
class JudgeVerdict:
    scene_ref: str
    view: str
    verdict: Optional[str]  # "YES" / "NO", None when flagged
    confidence: Optional[int]
    indicators: str
    raw: str
    flagged: bool = False
    reason: str = ""


class JudgeClient(Protocol):
    def complete(self, messages: list[dict]) -> str: ...


class JudgeTransportError(RuntimeError):
    pass


def png_data_url(image: np.ndarray) -> str:
    arr = np.round(np.clip(np.asarray(image), 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def build_messages(image: np.ndarray, bundle: PromptBundle) -> list[dict]:
    """Chat-completion messages: the system prompt, then the user prompt with one image."""
    return [
        {"role": "system", "content": bundle.system},
        {"role": "user", "content": [
            {"type": "text", "text": bundle.user},
            {"type": "image_url", "image_url": {"url": png_data_url(image)}},
        ]},
    ]


def request_key(messages: list[dict]) -> str:
    blob = json.dumps(messages, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# -- parsing -----------------------------------------------------------------------

_LABEL = re.compile(r"^\s*(?:[#>*_\s]*)(?:\d+\s*[.)]\s*)?(?:[*_]*\s*verdict\s*[*_]*\s*:?\s*)?", re.I)
_WORD = re.compile(r"^[*_\s]*(YES|NO)[*_\s.!]*$")
_CONF_LABELLED = re.compile(r"confidence[^0-9]*?(?<![\d.])([1-5])(?:\s*/\s*5)?(?![\d.]*\d)", re.I)
_PAREN = re.compile(r"\([^)]*\)")
_CONF_BARE = re.compile(r"[*_\s]*([1-5])\s*(?:/\s*5)?[*_\s.]*")
_SECTION = re.compile(r"realism indicators\s*[*_]*\s*:?(.*?)(?=\n\s*(?:[#>*_\s]*)(?:\d+\s*[.)]\s*)?[*_]*\s*verdict\b|\Z)",
                      re.I | re.S)


def parse_verdict(raw: str, scene_ref: str = "", view: str = "") -> JudgeVerdict:
    """Parse one judge response; anything ambiguous is flagged rather than guessed.

    The verdict must be a line holding only YES or NO (optionally after a
    "VERDICT:" label or list number); confidence is the first 1-5 integer after it.
    """
    lines = raw.splitlines()
    hits = []
    for i, line in enumerate(lines):
        m = _WORD.match(_LABEL.sub("", line, count=1))
        if m:
            hits.append((i, m.group(1)))
    words = {w for _, w in hits}
    indicators = ""
    sec = _SECTION.search(raw)
    if sec:
        indicators = sec.group(1).strip()
    if len(words) != 1:
        reason = "no standalone YES/NO line" if not words else "conflicting YES and NO lines"
        return JudgeVerdict(scene_ref, view, None, None, indicators, raw, True, reason)
    line_no, word = hits[-1]
    confidence = None
    for line in lines[line_no + 1:]:
        # parenthetical scale hints such as "(1-5)" are not answers
        m = _CONF_LABELLED.search(_PAREN.sub(" ", line)) or _CONF_BARE.fullmatch(line)
        if m:
            confidence = int(m.group(1))
            break
    if confidence is None:
        return JudgeVerdict(scene_ref, view, None, None, indicators, raw, True, "no 1-5 confidence after verdict")
    return JudgeVerdict(scene_ref, view, word, confidence, indicators, raw)


# -- clients ---------------------------------------------------------------------


class HTTPJudgeClient:
    """Chat-completion endpoint client; URL, key and model default to environment variables."""

    def __init__(self, url: Optional[str] = None, api_key: Optional[str] = None, model: Optional[str] = None,
                 timeout: float = 60.0):
        self.url = url or os.environ.get(ENV_URL)
        if not self.url:
            raise JudgeTransportError(f"no judge endpoint configured (set {ENV_URL})")
        self.api_key = api_key or os.environ.get(ENV_KEY, "")
        self.model = model or os.environ.get(ENV_MODEL, "judge")
        self.timeout = timeout

    def complete(self, messages: list[dict]) -> str:
        payload = json.dumps({"model": self.model, "messages": messages, "temperature": 0}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.url, data=payload, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise JudgeTransportError(str(exc)) from exc
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise JudgeTransportError(f"unexpected response body: {exc}") from exc


class ArchivingClient:
    """Wraps a client and appends every raw response to a JSONL archive."""

    def __init__(self, inner: JudgeClient, archive: Path):
        self.inner = inner
        self.archive = Path(archive)
        self._lock = threading.Lock()

    def complete(self, messages: list[dict]) -> str:
        raw = self.inner.complete(messages)
        with self._lock:
            self.archive.parent.mkdir(parents=True, exist_ok=True)
            with self.archive.open("a", encoding="utf-8") as f:
                f.write(json.dumps({"key": request_key(messages), "response": raw}, ensure_ascii=False) + "\n")
        return raw


class ReplayClient:
    """Serves archived responses keyed by the exact request."""

    def __init__(self, archive: Path):
        self.responses = {}
        for line in Path(archive).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                self.responses[rec["key"]] = rec["response"]

    def complete(self, messages: list[dict]) -> str:
        key = request_key(messages)
        if key not in self.responses:
            raise JudgeTransportError(f"request {key[:12]} not in archive")
        return self.responses[key]


class RateLimiter:
    def __init__(self, min_interval: float = 0.0, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.min_interval = min_interval
        self.clock, self.sleep = clock, sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        if self.min_interval <= 0:
            return
        with self._lock:
            now = self.clock()
            delay = self._next - now
            self._next = max(now, self._next) + self.min_interval
        if delay > 0:
            self.sleep(delay)


def call_with_retry(client: JudgeClient, messages: list[dict], retries: int = 3, backoff: float = 1.0,
                    sleep: Callable[[float], None] = time.sleep) -> str:
    for attempt in range(retries + 1):
        try:
            return client.complete(messages)
        except JudgeTransportError as exc:
            if attempt == retries:
                raise
            wait = backoff * 2 ** attempt
            log.warning("judge call failed (%s); retrying in %.1fs", exc, wait)
            sleep(wait)
    raise AssertionError("unreachable")


def judge_realism(items: list[tuple[str, str, np.ndarray]], client: JudgeClient,
                  bundle: Optional[PromptBundle] = None, max_in_flight: int = 2, min_interval: float = 0.0,
                  retries: int = 3, backoff: float = 1.0,
                  sleep: Callable[[float], None] = time.sleep) -> list[JudgeVerdict]:
    """One verdict per (scene_ref, view, image); each call carries a single view.

    Transport failures are retried with exponential backoff and then flagged.
    """
    bundle = bundle or PromptBundle.vendored()
    limiter = RateLimiter(min_interval, sleep=sleep)

    def one(item):
        ref, view, image = item
        messages = build_messages(image, bundle)
        limiter.wait()
        try:
            raw = call_with_retry(client, messages, retries, backoff, sleep)
        except JudgeTransportError as exc:
            return JudgeVerdict(ref, view, None, None, "", "", True, f"transport failure: {exc}")
        return parse_verdict(raw, ref, view)

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        return list(pool.map(one, items))


def realism_rate(verdicts: list[JudgeVerdict], n_resamples: int = 10_000, seed: int = 0) -> dict:
    """Fraction judged YES among parsed verdicts, with a percentile bootstrap interval."""
    parsed = [v for v in verdicts if not v.flagged]
    yes = np.array([v.verdict == "YES" for v in parsed], dtype=np.float64)
    out = {"n": len(parsed), "flagged": len(verdicts) - len(parsed)}
    if not len(parsed):
        return {**out, "rate": None, "ci_low": None, "ci_high": None, "mean_confidence": None}
    est, lo, hi = bootstrap_ci(yes, n_resamples=n_resamples, seed=seed)
    return {**out, "rate": est, "ci_low": lo, "ci_high": hi,
            "mean_confidence": float(np.mean([v.confidence for v in parsed]))}


def save_verdicts(verdicts: list[JudgeVerdict], path: Path) -> None:
    Path(path).write_text("".join(json.dumps(asdict(v), sort_keys=True) + "\n" for v in verdicts), encoding="utf-8")
