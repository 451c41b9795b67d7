"""Self-hosted forced-choice rating service.

Campaigns pack evaluation items into batches of ten: nine real pairs (model
vs. human description, presentation order randomized) plus one hidden
honeypot whose wrong side is the true description of a different entity.
Workers pass a language entry question, may rate each batch once, and are
excluded once they fail more than 20% of encountered honeypots; excluded
workers' votes are discarded and their batch slots reopened.

All state changes append to a JSONL event log before acknowledgment; replay
of the log reconstructs identical state.
"""

from __future__ import annotations

import json
import math
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .analysis import fleiss_kappa

BATCH_SIZE = 10
REAL_ITEMS_PER_BATCH = 9
RATERS_PER_ITEM = 3
HONEYPOT_FAILURE_LIMIT = 0.20
CHOICES = ("option_1", "option_2")

PUBLIC_ITEM_KEYS = {"item_id", "snippet", "option_1", "option_2"}


class ServiceError(Exception):
    def __init__(self, code: str, message: str, http_status: int = 400):
        super().__init__(message)
        self.code = code
        self.message = message
        self.http_status = http_status


def _bad(code: str, message: str) -> ServiceError:
    return ServiceError(code, message, 400)


def _forbidden(code: str, message: str) -> ServiceError:
    return ServiceError(code, message, 403)


def _missing(code: str, message: str) -> ServiceError:
    return ServiceError(code, message, 404)


def _conflict(code: str, message: str) -> ServiceError:
    return ServiceError(code, message, 409)


# ---------------------------------------------------------------------------
# Campaign data


@dataclass
class EvalItemSource:
    """One evaluation pair: the entity's article snippet plus both descriptions."""

    entity_id: str
    snippet: str
    model_description: str
    human_description: str
    score: float | None = None  # automatic-metric score, kept for decile breakdowns


@dataclass
class HoneypotSource:
    entity_id: str
    snippet: str
    true_description: str


@dataclass
class RatingItem:
    item_id: str
    entity_id: str
    snippet: str
    option_1: str
    option_2: str
    sides: dict[str, str]  # choice -> "model" | "human" | "truth" | "decoy"
    is_honeypot: bool
    decoy_entity_id: str | None = None
    score: float | None = None

    def public_view(self) -> dict:
        return {
            "item_id": self.item_id,
            "snippet": self.snippet,
            "option_1": self.option_1,
            "option_2": self.option_2,
        }


@dataclass
class RatingBatch:
    batch_id: str
    language: str
    items: list[RatingItem]

    def __post_init__(self) -> None:
        if len(self.items) != BATCH_SIZE:
            raise _bad("bad_batch", f"batch must have {BATCH_SIZE} items")
        if sum(1 for item in self.items if item.is_honeypot) != 1:
            raise _bad("bad_batch", "batch must contain exactly one honeypot")

    def item(self, item_id: str) -> RatingItem:
        for item in self.items:
            if item.item_id == item_id:
                return item
        raise _missing("unknown_item", f"item {item_id!r} not in batch {self.batch_id!r}")


@dataclass
class EntryQuestion:
    question: str
    choices: list[str]
    correct_choice: int


@dataclass
class Campaign:
    campaign_id: str
    language: str
    batches: dict[str, RatingBatch]
    entry_question: EntryQuestion
    leftover_entity_ids: list[str] = field(default_factory=list)


def create_campaign(
    campaign_id: str,
    items: Sequence[EvalItemSource],
    language: str,
    honeypot_pool: Sequence[HoneypotSource],
    seed: int,
    entry_question: EntryQuestion,
) -> Campaign:
    """Partition items into batches of nine, inject one honeypot each, and
    randomize per-item presentation order. Deterministic given the seed."""
    if len(items) < REAL_ITEMS_PER_BATCH:
        raise _bad("too_few_items", f"need at least {REAL_ITEMS_PER_BATCH} items")
    if len({h.entity_id for h in honeypot_pool}) < 2:
        raise _bad("small_honeypot_pool", "honeypot pool needs at least two distinct entities")
    rng = random.Random(seed)
    shuffled = list(items)
    rng.shuffle(shuffled)
    n_batches = len(shuffled) // REAL_ITEMS_PER_BATCH
    leftovers = shuffled[n_batches * REAL_ITEMS_PER_BATCH :]
    batches: dict[str, RatingBatch] = {}
    for b in range(n_batches):
        chunk = shuffled[b * REAL_ITEMS_PER_BATCH : (b + 1) * REAL_ITEMS_PER_BATCH]
        rating_items = []
        for k, source in enumerate(chunk):
            rating_items.append(
                _make_pair_item(f"{campaign_id}-b{b}-i{k}", source, rng)
            )
        honeypot = _make_honeypot_item(f"{campaign_id}-b{b}-hp", honeypot_pool, rng)
        position = rng.randrange(BATCH_SIZE)
        rating_items.insert(position, honeypot)
        batch_id = f"{campaign_id}-b{b}"
        batches[batch_id] = RatingBatch(batch_id, language, rating_items)
    return Campaign(
        campaign_id,
        language,
        batches,
        entry_question,
        leftover_entity_ids=[s.entity_id for s in leftovers],
    )


def _make_pair_item(item_id: str, source: EvalItemSource, rng: random.Random) -> RatingItem:
    model_first = rng.random() < 0.5
    options = (
        (source.model_description, source.human_description)
        if model_first
        else (source.human_description, source.model_description)
    )
    sides = (
        {"option_1": "model", "option_2": "human"}
        if model_first
        else {"option_1": "human", "option_2": "model"}
    )
    return RatingItem(
        item_id=item_id,
        entity_id=source.entity_id,
        snippet=source.snippet,
        option_1=options[0],
        option_2=options[1],
        sides=sides,
        is_honeypot=False,
        score=source.score,
    )


def _make_honeypot_item(
    item_id: str, pool: Sequence[HoneypotSource], rng: random.Random
) -> RatingItem:
    base = pool[rng.randrange(len(pool))]
    decoys = [h for h in pool if h.entity_id != base.entity_id]
    decoy = decoys[rng.randrange(len(decoys))]
    truth_first = rng.random() < 0.5
    options = (
        (base.true_description, decoy.true_description)
        if truth_first
        else (decoy.true_description, base.true_description)
    )
    sides = (
        {"option_1": "truth", "option_2": "decoy"}
        if truth_first
        else {"option_1": "decoy", "option_2": "truth"}
    )
    return RatingItem(
        item_id=item_id,
        entity_id=base.entity_id,
        snippet=base.snippet,
        option_1=options[0],
        option_2=options[1],
        sides=sides,
        is_honeypot=True,
        decoy_entity_id=decoy.entity_id,
    )


# ---------------------------------------------------------------------------
# Worker and vote records


@dataclass
class WorkerRecord:
    worker_id: str
    entry_passed: dict[str, bool] = field(default_factory=dict)
    honeypots_seen: int = 0
    honeypots_failed: int = 0

    @property
    def excluded(self) -> bool:
        return self.honeypots_seen >= 1 and (
            self.honeypots_failed / self.honeypots_seen > HONEYPOT_FAILURE_LIMIT
        )


@dataclass(frozen=True)
class Vote:
    batch_id: str
    item_id: str
    worker_id: str
    choice: str
    timestamp: float


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """95% score interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    phat = successes / n
    denom = 1 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return (center - half, center + half)


# ---------------------------------------------------------------------------
# Service


class RatingService:
    """In-memory campaign state backed by an append-only JSONL event log.

    Every mutation is serialized under one lock and appended (with fsync)
    before it is acknowledged; constructing a service on an existing log
    replays it to identical state.
    """

    def __init__(self, log_path: str | Path):
        self.log_path = Path(log_path)
        self._lock = threading.Lock()
        self.campaigns: dict[str, Campaign] = {}
        self.workers: dict[str, WorkerRecord] = {}
        self.assignments: dict[str, list[str]] = {}  # batch_id -> worker ids in order
        self.votes: dict[tuple[str, str], Vote] = {}  # (item_id, worker_id) -> vote
        if self.log_path.exists():
            self._replay()
        self._log_fh = open(self.log_path, "a", encoding="utf-8")

    # -- event log ----------------------------------------------------------

    def _append(self, event: dict) -> None:
        self._log_fh.write(json.dumps(event, ensure_ascii=False, sort_keys=True) + "\n")
        self._log_fh.flush()
        os.fsync(self._log_fh.fileno())

    def _replay(self) -> None:
        with open(self.log_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    self._apply(json.loads(line))

    def _apply(self, event: dict) -> None:
        kind = event["event"]
        if kind == "campaign":
            campaign = _campaign_from_dict(event["campaign"])
            self.campaigns[campaign.campaign_id] = campaign
        elif kind == "gate":
            record = self.workers.setdefault(event["worker_id"], WorkerRecord(event["worker_id"]))
            record.entry_passed.setdefault(event["campaign_id"], event["admitted"])
        elif kind == "assign":
            self.assignments.setdefault(event["batch_id"], []).append(event["worker_id"])
        elif kind == "vote":
            vote = Vote(
                event["batch_id"], event["item_id"], event["worker_id"],
                event["choice"], event["timestamp"],
            )
            self.votes[(vote.item_id, vote.worker_id)] = vote
            self._update_honeypot_counters(vote)
        else:
            raise _bad("bad_event", f"unknown event type {kind!r}")

    def _update_honeypot_counters(self, vote: Vote) -> None:
        campaign = self._campaign_of_batch(vote.batch_id)
        item = campaign.batches[vote.batch_id].item(vote.item_id)
        if item.is_honeypot:
            record = self.workers.setdefault(vote.worker_id, WorkerRecord(vote.worker_id))
            record.honeypots_seen += 1
            if item.sides[vote.choice] == "decoy":
                record.honeypots_failed += 1

    # -- helpers -------------------------------------------------------------

    def _campaign_of_batch(self, batch_id: str) -> Campaign:
        for campaign in self.campaigns.values():
            if batch_id in campaign.batches:
                return campaign
        raise _missing("unknown_batch", f"no batch {batch_id!r}")

    def _resolve_campaign(self, campaign_id: str | None) -> Campaign:
        if campaign_id is None:
            if len(self.campaigns) == 1:
                return next(iter(self.campaigns.values()))
            raise _bad("campaign_required", "multiple campaigns; pass campaign_id")
        if campaign_id not in self.campaigns:
            raise _missing("unknown_campaign", f"no campaign {campaign_id!r}")
        return self.campaigns[campaign_id]

    def _active_assignees(self, batch_id: str) -> list[str]:
        return [
            wid
            for wid in self.assignments.get(batch_id, [])
            if not self.workers[wid].excluded
        ]

    def _worker_votes_on_batch(self, batch: RatingBatch, worker_id: str) -> int:
        return sum(1 for item in batch.items if (item.item_id, worker_id) in self.votes)

    # -- operations ----------------------------------------------------------

    def install_campaign(self, campaign: Campaign) -> None:
        with self._lock:
            if campaign.campaign_id in self.campaigns:
                raise _conflict("duplicate_campaign", f"campaign {campaign.campaign_id!r} exists")
            self._append({"event": "campaign", "campaign": _campaign_to_dict(campaign)})
            self.campaigns[campaign.campaign_id] = campaign

    def gate_worker(self, worker_id: str, answer: int, campaign_id: str | None = None) -> bool:
        """Admit the worker iff the entry answer is correct; first answer sticks."""
        with self._lock:
            campaign = self._resolve_campaign(campaign_id)
            record = self.workers.setdefault(worker_id, WorkerRecord(worker_id))
            if campaign.campaign_id in record.entry_passed:
                return record.entry_passed[campaign.campaign_id]
            admitted = answer == campaign.entry_question.correct_choice
            self._append(
                {
                    "event": "gate",
                    "worker_id": worker_id,
                    "campaign_id": campaign.campaign_id,
                    "answer": answer,
                    "admitted": admitted,
                }
            )
            record.entry_passed[campaign.campaign_id] = admitted
            return admitted

    def assign_batch(
        self, worker_id: str, campaign_id: str | None = None, allow_parallel: bool = False
    ) -> dict | None:
        """Return a stripped batch view for the worker, or None when none is eligible.

        Re-requesting while a batch is unfinished returns the same batch, so
        client retries are idempotent; ``allow_parallel`` skips that shortcut
        and hands out an additional batch (workers may hold several at once).
        """
        with self._lock:
            campaign = self._resolve_campaign(campaign_id)
            record = self.workers.get(worker_id)
            if record is None or not record.entry_passed.get(campaign.campaign_id, False):
                raise _forbidden("not_admitted", "worker has not passed the entry question")
            if record.excluded:
                raise _forbidden("excluded", "worker failed too many honeypots")
            if not allow_parallel:
                # unfinished batch already assigned to this worker: serve it again
                for batch_id in sorted(campaign.batches):
                    batch = campaign.batches[batch_id]
                    if worker_id in self.assignments.get(batch_id, []) and (
                        self._worker_votes_on_batch(batch, worker_id) < len(batch.items)
                    ):
                        return self._public_batch(batch)
            for batch_id in sorted(campaign.batches):
                batch = campaign.batches[batch_id]
                if worker_id in self.assignments.get(batch_id, []):
                    continue
                if len(self._active_assignees(batch_id)) >= RATERS_PER_ITEM:
                    continue
                self._append({"event": "assign", "worker_id": worker_id, "batch_id": batch_id})
                self.assignments.setdefault(batch_id, []).append(worker_id)
                return self._public_batch(batch)
            return None

    def _public_batch(self, batch: RatingBatch) -> dict:
        return {
            "batch_id": batch.batch_id,
            "language": batch.language,
            "items": [item.public_view() for item in batch.items],
        }

    def record_vote(self, batch_id: str, item_id: str, worker_id: str, choice: str) -> dict:
        """Durably record one forced-choice vote; duplicates conflict."""
        with self._lock:
            if choice not in CHOICES:
                raise _bad("bad_choice", f"choice must be one of {CHOICES}")
            campaign = self._campaign_of_batch(batch_id)
            batch = campaign.batches[batch_id]
            batch.item(item_id)  # raises for unknown item
            if worker_id not in self.assignments.get(batch_id, []):
                raise _forbidden("not_assigned", "worker is not assigned to this batch")
            if (item_id, worker_id) in self.votes:
                raise _conflict("duplicate_vote", "vote already recorded for this item")
            vote = Vote(batch_id, item_id, worker_id, choice, time.time())
            self._append(
                {
                    "event": "vote",
                    "batch_id": batch_id,
                    "item_id": item_id,
                    "worker_id": worker_id,
                    "choice": choice,
                    "timestamp": vote.timestamp,
                }
            )
            self.votes[(item_id, worker_id)] = vote
            self._update_honeypot_counters(vote)
            return {"status": "ok", "votes_in_batch": self._worker_votes_on_batch(batch, worker_id)}

    def aggregate_results(self, campaign_id: str | None = None) -> dict:
        """Majority-vote outcomes over valid votes (non-excluded workers only)."""
        with self._lock:
            campaign = self._resolve_campaign(campaign_id)
            per_item = []
            complete_flags = []
            model_wins = 0
            complete = 0
            agreement_rows = []
            decile_rows = []
            for batch_id in sorted(campaign.batches):
                batch = campaign.batches[batch_id]
                for item in batch.items:
                    if item.is_honeypot:
                        continue
                    valid = [
                        vote
                        for (item_id, worker_id), vote in self.votes.items()
                        if item_id == item.item_id and not self.workers[worker_id].excluded
                    ]
                    valid.sort(key=lambda v: v.timestamp)
                    valid = valid[:RATERS_PER_ITEM]
                    votes_model = sum(1 for v in valid if item.sides[v.choice] == "model")
                    votes_human = len(valid) - votes_model
                    is_complete = len(valid) == RATERS_PER_ITEM
                    winner = None
                    if is_complete:
                        winner = "model" if votes_model > votes_human else "human"
                        complete += 1
                        model_wins += winner == "model"
                        agreement_rows.append([votes_model, votes_human])
                        if item.score is not None:
                            decile_rows.append((item.score, 1.0 if winner == "model" else 0.0))
                    per_item.append(
                        {
                            "item_id": item.item_id,
                            "entity_id": item.entity_id,
                            "votes_model": votes_model,
                            "votes_human": votes_human,
                            "complete": is_complete,
                            "winner": winner,
                        }
                    )
                    complete_flags.append(is_complete)
            fraction = model_wins / complete if complete else None
            low, high = wilson_interval(model_wins, complete) if complete else (None, None)
            kappa = fleiss_kappa(agreement_rows, RATERS_PER_ITEM) if agreement_rows else None
            deciles = None
            if decile_rows:
                from .analysis import stratify

                strata = stratify(decile_rows, n_bins=min(10, len(decile_rows)))
                deciles = [
                    {
                        "lower": s.lower,
                        "upper": s.upper,
                        "count": s.count,
                        "model_win_fraction": s.mean_score,
                    }
                    for s in strata
                ]
            return {
                "campaign_id": campaign.campaign_id,
                "language": campaign.language,
                "items": per_item,
                "complete_items": complete,
                "incomplete_items": sum(1 for f in complete_flags if not f),
                "partial": not all(complete_flags),
                "model_win_fraction": fraction,
                "wilson_95": [low, high],
                "fleiss_kappa": kappa,
                "per_decile": deciles,
                "excluded_workers": sorted(
                    wid for wid, rec in self.workers.items() if rec.excluded
                ),
            }

    def worker_status(self, worker_id: str) -> dict:
        with self._lock:
            record = self.workers.get(worker_id)
            if record is None:
                raise _missing("unknown_worker", f"no worker {worker_id!r}")
            return {
                "worker_id": worker_id,
                "honeypots_seen": record.honeypots_seen,
                "honeypots_failed": record.honeypots_failed,
                "excluded": record.excluded,
            }

    def close(self) -> None:
        self._log_fh.close()


# ---------------------------------------------------------------------------
# Campaign (de)serialization for the event log


def _campaign_to_dict(campaign: Campaign) -> dict:
    return {
        "campaign_id": campaign.campaign_id,
        "language": campaign.language,
        "entry_question": asdict(campaign.entry_question),
        "leftover_entity_ids": campaign.leftover_entity_ids,
        "batches": {
            batch_id: [asdict(item) for item in batch.items]
            for batch_id, batch in campaign.batches.items()
        },
    }


def _campaign_from_dict(raw: dict) -> Campaign:
    batches = {
        batch_id: RatingBatch(batch_id, raw["language"], [RatingItem(**item) for item in items])
        for batch_id, items in raw["batches"].items()
    }
    return Campaign(
        raw["campaign_id"],
        raw["language"],
        batches,
        EntryQuestion(**raw["entry_question"]),
        raw.get("leftover_entity_ids", []),
    )


# ---------------------------------------------------------------------------
# HTTP layer (stdlib, JSON over HTTP)

from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse


def make_handler(service: RatingService, static_dir: str | Path | None = None):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, status: int, payload: dict) -> None:
            body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _send_error(self, exc: ServiceError) -> None:
            self._send(exc.http_status, {"code": exc.code, "message": exc.message})

        def _read_json(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return {}
            try:
                return json.loads(self.rfile.read(length))
            except json.JSONDecodeError as exc:
                raise _bad("bad_json", f"invalid JSON body: {exc.msg}") from exc

        def do_OPTIONS(self):  # CORS preflight
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.end_headers()

        def do_GET(self):
            url = urlparse(self.path)
            params = {k: v[0] for k, v in parse_qs(url.query).items()}
            try:
                if url.path == "/batch":
                    if "worker_id" not in params:
                        raise _bad("missing_worker", "worker_id query parameter required")
                    batch = service.assign_batch(
                        params["worker_id"],
                        params.get("campaign_id"),
                        allow_parallel=params.get("next") == "1",
                    )
                    self._send(200, {"batch": batch})
                elif url.path == "/results":
                    self._send(200, service.aggregate_results(params.get("campaign_id")))
                elif url.path == "/entry-question":
                    campaign = service._resolve_campaign(params.get("campaign_id"))
                    q = campaign.entry_question
                    self._send(
                        200,
                        {
                            "campaign_id": campaign.campaign_id,
                            "language": campaign.language,
                            "question": q.question,
                            "choices": q.choices,
                        },
                    )
                elif url.path == "/worker":
                    self._send(200, service.worker_status(params.get("worker_id", "")))
                elif static_dir is not None:
                    self._serve_static(url.path)
                else:
                    raise _missing("not_found", f"no route {url.path!r}")
            except ServiceError as exc:
                self._send_error(exc)

        def _serve_static(self, path: str) -> None:
            root = Path(static_dir).resolve()
            rel = path.lstrip("/") or "index.html"
            target = (root / rel).resolve()
            if not str(target).startswith(str(root)) or not target.is_file():
                raise _missing("not_found", f"no route {path!r}")
            body = target.read_bytes()
            types = {".html": "text/html", ".js": "text/javascript", ".css": "text/css"}
            self.send_response(200)
            self.send_header("Content-Type", types.get(target.suffix, "application/octet-stream"))
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            url = urlparse(self.path)
            try:
                body = self._read_json()
                if url.path == "/gate":
                    for key in ("worker_id", "answer"):
                        if key not in body:
                            raise _bad("missing_field", f"{key} required")
                    admitted = service.gate_worker(
                        body["worker_id"], body["answer"], body.get("campaign_id")
                    )
                    self._send(200, {"admitted": admitted})
                elif url.path == "/vote":
                    for key in ("batch_id", "item_id", "worker_id", "choice"):
                        if key not in body:
                            raise _bad("missing_field", f"{key} required")
                    ack = service.record_vote(
                        body["batch_id"], body["item_id"], body["worker_id"], body["choice"]
                    )
                    self._send(200, ack)
                else:
                    raise _missing("not_found", f"no route {url.path!r}")
            except ServiceError as exc:
                self._send_error(exc)

    return Handler


def serve(service: RatingService, host: str = "127.0.0.1", port: int = 0,
          static_dir: str | Path | None = None) -> ThreadingHTTPServer:
    """Start the HTTP server (returns it; call .shutdown() to stop)."""
    server = ThreadingHTTPServer((host, port), make_handler(service, static_dir))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
