"""Pseudo-raters: a remote auditory-LLM client and a deterministic severity oracle."""

from __future__ import annotations

import base64
import json
import logging
import math
import os
import re
import socket
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

from .audio_io import Waveform, encode_wav, load_canonical
from .dataeval.manifest import Manifest
from .degrade import (
    CLIPPING, GAIN, LOWPASS, MASK, MP3, NOISE, PITCH, ROOM, STRETCH, DegradationSpec, constituents,
)

log = logging.getLogger(__name__)

PROMPT = "Please evaluate the quality of the speech sample and only answer me with a score"
LLM_REMOTE = "llm_remote"
ORACLE = "oracle"
DEFAULT_TOKEN_ENV = "SQA_LLM_TOKEN"
MAX_UNLABELED_FRACTION = 0.10

_NUMBER = re.compile(r"(?<![\w.])-?\d+(?:\.\d+)?")


class RaterError(Exception):
    pass


class RaterConfigError(RaterError, ValueError):
    """Bad configuration or a 4xx from the endpoint; labeling should stop."""


class LabelParseError(RaterError):
    """The rater never produced a usable score for this clip."""


class LabelingError(RaterError):
    """Too many clips stayed unlabeled. ``manifest`` holds the partial result."""

    def __init__(self, message, manifest=None, stats=None):
        super().__init__(message)
        self.manifest = manifest
        self.stats = stats


def quality_score(value: float) -> float:
    return min(5.0, max(1.0, float(value)))


@dataclass
class RaterConfig:
    kind: str = ORACLE
    endpoint_url: str | None = None
    auth_token_env_name: str = DEFAULT_TOKEN_ENV
    timeout_s: float = 60.0
    max_retries: int = 3
    prompt: str = PROMPT
    backoff_s: tuple = (1.0, 2.0, 4.0)
    oracle_variant: str = "default"

    def __post_init__(self):
        if self.kind not in (LLM_REMOTE, ORACLE):
            raise RaterConfigError(f"unknown rater kind {self.kind!r}")
        if self.kind == LLM_REMOTE and not self.endpoint_url:
            raise RaterConfigError("the remote LLM rater needs an endpoint_url")
        if self.max_retries < 0 or self.timeout_s <= 0:
            raise RaterConfigError("max_retries must be >= 0 and timeout_s > 0")
        if self.kind == ORACLE and self.oracle_variant not in ORACLE_VARIANTS:
            raise RaterConfigError(f"unknown oracle variant {self.oracle_variant!r}")
        self.backoff_s = tuple(float(b) for b in self.backoff_s)

    def backoff(self, attempt: int) -> float:
        if not self.backoff_s:
            return 0.0
        return self.backoff_s[min(attempt, len(self.backoff_s) - 1)]


# ---------------------------------------------------------------- oracle

def _unit(v: float) -> float:
    return min(1.0, max(0.0, v))


# parameter -> severity in [0, 1], 1 at the worst end of its range
SEVERITY = {
    NOISE: lambda p: _unit((15.0 - p["snr_db"]) / 25.0),
    CLIPPING: lambda p: _unit((p["clip_percentile"] - 10.0) / 30.0),
    GAIN: lambda p: _unit((20.0 - p["gain_db"]) / 80.0),
    LOWPASS: lambda p: _unit((1000.0 - p["cutoff_hz"]) / 500.0),
    MP3: lambda p: _unit((14.0 - p["bit_rate_kbps"]) / 6.0),
    PITCH: lambda p: _unit(abs(p["semitones"]) / 4.0),
    ROOM: lambda p: _unit((p["rt60_s"] - 0.8) / 0.7),
    MASK: lambda p: _unit((p["band_part"] - 0.2) / 0.3),
    STRETCH: lambda p: _unit(abs(math.log2(p["rate"]))),
}


@dataclass(frozen=True)
class OracleVariant:
    weights: dict
    scale: float = 1.0
    shift: float = 0.0


ORACLE_WEIGHTS = {NOISE: 2.5, LOWPASS: 1.0, CLIPPING: 1.5, ROOM: 1.0, MP3: 1.0,
                  GAIN: 1.5, MASK: 1.0, STRETCH: 1.0, PITCH: 0.8}

# Stand-in for human listeners in transfer experiments: weights disagree with the
# default oracle and the scale is compressed and shifted.
HUMAN_PROXY_WEIGHTS = {NOISE: 2.0, LOWPASS: 1.4, CLIPPING: 1.2, ROOM: 1.6, MP3: 0.7,
                       GAIN: 1.1, MASK: 1.3, STRETCH: 0.7, PITCH: 1.2}

ORACLE_VARIANTS = {
    "default": OracleVariant(ORACLE_WEIGHTS),
    "human_proxy": OracleVariant(HUMAN_PROXY_WEIGHTS, scale=0.8, shift=0.6),
}


def oracle_severity(spec: DegradationSpec, weights: dict = ORACLE_WEIGHTS) -> float:
    total = 0.0
    for c in constituents(spec.condition):
        if c in SEVERITY:
            total += weights[c] * SEVERITY[c](spec.params)
    return total


def rate_oracle(clip: Waveform | None, spec: DegradationSpec, variant: str = "default") -> float:
    """Score from the known degradation alone; ``clip`` is not inspected."""
    v = ORACLE_VARIANTS[variant]
    raw = min(5.0, max(1.0, 5.0 - oracle_severity(spec, v.weights)))
    return quality_score(v.scale * raw + v.shift)


# ---------------------------------------------------------------- remote LLM

def parse_score(text: str) -> float:
    m = _NUMBER.search(text)
    if m is None:
        raise LabelParseError(f"no score in response {text[:80]!r}")
    return quality_score(float(m.group(0)))


def request_body(clip: Waveform, prompt: str) -> bytes:
    return json.dumps({
        "audio_b64": base64.b64encode(encode_wav(clip)).decode("ascii"),
        "sample_rate": clip.sample_rate,
        "prompt": prompt,
    }).encode()


def _post(cfg: RaterConfig, body: bytes) -> str:
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(cfg.auth_token_env_name)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    req = urllib.request.Request(cfg.endpoint_url, data=body, headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=cfg.timeout_s) as resp:
        return resp.read().decode("utf-8", errors="replace")


def rate_llm(clip: Waveform, cfg: RaterConfig, sleep=time.sleep) -> float:
    """POST the clip and the prompt, return the first number in the reply clamped to [1, 5].

    Transport errors, 5xx responses and unparseable replies are retried with
    exponential backoff; a 4xx raises RaterConfigError immediately.
    """
    if cfg.kind != LLM_REMOTE:
        raise RaterConfigError("rate_llm needs a llm_remote config")
    body = request_body(clip, cfg.prompt)
    last = None
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            sleep(cfg.backoff(attempt - 1))
        try:
            return parse_score(_post(cfg, body))
        except urllib.error.HTTPError as exc:
            if 400 <= exc.code < 500:
                raise RaterConfigError(f"endpoint rejected the request: HTTP {exc.code}") from exc
            last = exc
        except (urllib.error.URLError, ConnectionError, socket.timeout, TimeoutError) as exc:
            last = exc
        except LabelParseError as exc:
            last = exc
        log.debug("rater attempt %d failed: %s", attempt + 1, last)
    if isinstance(last, LabelParseError):
        raise last
    raise LabelParseError(f"no score after {cfg.max_retries + 1} attempts: {last}")


# ---------------------------------------------------------------- manifests

@dataclass
class LabelStats:
    total: int = 0
    labeled: int = 0
    skipped: int = 0
    failed: int = 0
    failures: list = field(default_factory=list)


def _rate_record(manifest: Manifest, record, cfg: RaterConfig):
    if cfg.kind == ORACLE:
        if record.condition is None:
            raise LabelParseError(f"{record.clip_path}: oracle needs a recorded condition")
        score = rate_oracle(None, DegradationSpec.from_dict(record.condition), cfg.oracle_variant)
        return score, "oracle", f"oracle:{cfg.oracle_variant}"
    clip = load_canonical(manifest.path_of(record))
    return rate_llm(clip, cfg), "llm", f"llm:{cfg.endpoint_url}"


def label_manifest(manifest: Manifest, cfg: RaterConfig, concurrency: int = 1,
                   force: bool = False) -> tuple[Manifest, LabelStats]:
    """Label every unlabeled row; returns the new manifest (row order kept) and counts.

    Clips that fail are left unlabeled. More than 10% unlabeled raises
    LabelingError carrying the partial manifest.
    """
    if concurrency < 1:
        raise RaterConfigError("concurrency must be >= 1")
    records = list(manifest.records)
    todo = [i for i, r in enumerate(records) if force or not r.labeled]
    stats = LabelStats(total=len(records), skipped=len(records) - len(todo))

    def work(i):
        try:
            return i, _rate_record(manifest, records[i], cfg), None
        except RaterConfigError:
            raise
        except Exception as exc:  # one bad clip must not stop the run
            return i, None, exc

    if concurrency == 1 or len(todo) <= 1:
        results = [work(i) for i in todo]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            results = list(pool.map(work, todo))

    for i, res, exc in results:
        if exc is None:
            score, rater, detail = res
            records[i] = replace(records[i], label=score, rater=rater, rater_detail=detail)
            stats.labeled += 1
        else:
            log.warning("could not label %s: %s", records[i].clip_path, exc)
            records[i] = replace(records[i], label=None, rater="none", rater_detail=None)
            stats.failed += 1
            stats.failures.append((records[i].clip_path, str(exc)))

    out = Manifest(records, manifest.base_dir)
    unlabeled = sum(1 for r in records if not r.labeled)
    if records and unlabeled / len(records) > MAX_UNLABELED_FRACTION:
        raise LabelingError(f"{unlabeled}/{len(records)} clips unlabeled (> 10%)", out, stats)
    return out, stats
