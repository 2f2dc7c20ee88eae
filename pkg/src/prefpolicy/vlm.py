"""Two-stage VLM preference querying over HTTP, plus an in-process mock server.

Wire contract: ``POST`` a JSON body ``{"model", "messages": [{"role", "content": [...]}]}``
where content parts are ``{"type": "text", "text": ...}`` or
``{"type": "image", "mime_type": "image/png", "data": <base64>}``. The reply is
JSON ``{"content": <text>}``.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import requests
from PIL import Image

from prefpolicy.data import PreferencePair, Segment
from prefpolicy.errors import TeacherNetworkError
from prefpolicy.teachers import TeacherConfig, oracle_label, select_frames

log = logging.getLogger(__name__)

API_KEY_ENV = "PREFPOLICY_VLM_API_KEY"
TOKEN_TO_LABEL = {"0": 0.0, "1": 1.0, "-1": 0.5}
LABEL_TO_TOKEN = {v: k for k, v in TOKEN_TO_LABEL.items()}
_TOKEN_RE = re.compile(r"\s*(-1|0|1)\s*\.?\s*")


def load_template(name: str) -> str:
    """A bundled template id (``stage1``/``stage2``) or a path to a UTF-8 text file."""
    path = Path(name)
    if path.suffix and path.exists():
        return path.read_text(encoding="utf-8")
    return resources.files("prefpolicy.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def fill_template(template: str, **values: str) -> str:
    for key, value in values.items():
        template = template.replace("{" + key + "}", value)
    return template


def encode_png(raster: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(raster, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def parse_token(text: str) -> Optional[float]:
    m = _TOKEN_RE.fullmatch(text or "")
    return TOKEN_TO_LABEL[m.group(1)] if m else None


def segment_images(seg: Segment, frame_store) -> list[str]:
    return [encode_png(frame_store[h]) for h in select_frames(seg)]


def images_digest(images: list[str]) -> str:
    return hashlib.sha256("|".join(images).encode("ascii")).hexdigest()


@dataclass
class VlmResult:
    label: Optional[float]
    stage1: Optional[str]
    stage2: Optional[str]
    error: Optional[str] = None
    network_failure: bool = False


class VlmClient:
    def __init__(self, endpoint: str, model: str, timeout: float = 30.0, max_retries: int = 3,
                 stage1_template: str = "stage1", stage2_template: str = "stage2"):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries
        self.stage1 = load_template(stage1_template)
        self.stage2 = load_template(stage2_template)
        self.session = requests.Session()
        key = os.environ.get(API_KEY_ENV)
        if key:
            self.session.headers["Authorization"] = f"Bearer {key}"

    @classmethod
    def from_config(cls, config: TeacherConfig) -> "VlmClient":
        return cls(config.endpoint, config.model, config.timeout, config.max_retries,
                   config.stage1_template, config.stage2_template)

    def _post(self, content: list[dict]) -> str:
        body = {"model": self.model, "messages": [{"role": "user", "content": content}]}
        resp = self.session.post(self.endpoint, json=body, timeout=self.timeout)
        resp.raise_for_status()
        return str(resp.json()["content"])

    def query(self, images: list[str], task_description: str) -> VlmResult:
        """Stage 1: six frames plus an analysis prompt. Stage 2: extract one token.

        ``max_retries`` is the total number of attempts before the record is marked invalid.
        """
        stage1 = stage2 = None
        error, network_only = "no attempts made", True
        for attempt in range(self.max_retries):
            try:
                content = [{"type": "text", "text": fill_template(self.stage1, task_description=task_description)}]
                content += [{"type": "image", "mime_type": "image/png", "data": img} for img in images]
                stage1 = self._post(content)
                prompt2 = fill_template(self.stage2, task_description=task_description, stage1_response=stage1)
                stage2 = self._post([{"type": "text", "text": prompt2}])
            except (requests.ConnectionError, requests.Timeout) as exc:
                error = f"network: {exc.__class__.__name__}"
                continue
            except (requests.HTTPError, ValueError, KeyError, TypeError) as exc:
                error, network_only = f"bad response: {exc}", False
                continue
            network_only = False
            label = parse_token(stage2)
            if label is not None:
                return VlmResult(label, stage1, stage2)
            error = f"unparseable stage-2 reply {stage2[:40]!r}"
        return VlmResult(None, stage1, stage2, error, network_failure=network_only)


def label_with_vlm(pairs, config: TeacherConfig, frame_store, client: VlmClient) -> tuple[list[PreferencePair], int]:
    """Query all pairs with bounded concurrency; output is in query-id order."""
    task = config.task_description

    def one(pair):
        a, b = pair
        return client.query(segment_images(a, frame_store) + segment_images(b, frame_store), task)

    with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
        results = list(pool.map(one, pairs))
    records, invalid, network = [], 0, 0
    for qid, ((a, b), res) in enumerate(zip(pairs, results)):
        if res.label is None:
            invalid += 1
            network += res.network_failure
            log.warning("query %d excluded: %s", qid, res.error)
            continue
        raw = json.dumps({"stage1": res.stage1, "stage2": res.stage2}, sort_keys=True)
        records.append(PreferencePair(a, b, res.label, config.kind, qid, raw))
    if pairs and not records and network:
        raise TeacherNetworkError(f"VLM endpoint {client.endpoint} unreachable for all {len(pairs)} queries")
    return records, invalid


# -- mock server ---------------------------------------------------------------------


class ScriptedResponder:
    """Answers stage-1 with canned text and stage-2 with the next scripted reply."""

    def __init__(self, replies: list[str], analysis: str = "Both sequences show the robot moving."):
        self.replies = list(replies)
        self.analysis = analysis
        self._i = 0
        self._lock = threading.Lock()

    def __call__(self, body: dict) -> tuple[int, str]:
        if _images(body):
            return 200, self.analysis
        with self._lock:
            reply = self.replies[self._i % len(self.replies)]
            self._i += 1
        return 200, reply


class OracleResponder:
    """Mock VLM whose verdict is the oracle label of the registered segment pair.

    Stage 1 plants the verdict in its analysis text; stage 2 reads it back from
    the prompt, so the client's two-stage plumbing is exercised end to end.
    """

    def __init__(self):
        self.verdicts: dict[str, str] = {}

    def register(self, pairs, frame_store, epsilon: float) -> None:
        for a, b in pairs:
            digest = images_digest(segment_images(a, frame_store) + segment_images(b, frame_store))
            self.verdicts[digest] = LABEL_TO_TOKEN[oracle_label(a, b, epsilon)]

    def __call__(self, body: dict) -> tuple[int, str]:
        images = _images(body)
        if images:
            token = self.verdicts.get(images_digest(images))
            if token is None:
                return 200, "I cannot tell these sequences apart. VERDICT: unknown"
            return 200, f"Sequence 1 and Sequence 2 differ in progress. VERDICT: {token}"
        m = re.search(r"VERDICT: (-1|0|1)\b", _texts(body))
        return 200, m.group(1) if m else "unsure"


def _content(body: dict) -> list[dict]:
    return [part for msg in body.get("messages", []) for part in msg.get("content", [])]


def _images(body: dict) -> list[str]:
    return [p["data"] for p in _content(body) if p.get("type") == "image"]


def _texts(body: dict) -> str:
    return "\n".join(p.get("text", "") for p in _content(body) if p.get("type") == "text")


class MockVlmServer:
    """Threaded local HTTP server implementing the VLM wire contract.

    Use as a context manager; ``url`` is valid while it is running.
    """

    def __init__(self, responder: Callable[[dict], tuple[int, str]], host: str = "127.0.0.1", port: int = 0):
        self.responder = responder
        self.requests: list[dict] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length))
                    outer.requests.append(body)
                    status, text = outer.responder(body)
                except Exception as exc:  # surface as a 500 so the client retries
                    status, text = 500, f"mock error: {exc}"
                payload = json.dumps({"content": text}).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1/chat"

    def start(self) -> "MockVlmServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
