"""Boundary to the external promptable mask decoder.

A worker process speaks line-delimited JSON on its standard streams and
side-loads mask tensors through CSTF-1 files:

    handshake (worker -> bridge):  {"protocol": "cyclesam-decode", "version": 1}
    request   (bridge -> worker):  {"id": N, "image": PATH, "prompts": {...}}
    response  (worker -> bridge):  {"id": N, "masks": PATH}  |  {"id": N, "error": MSG}

Responses name a CSTF-1 float32 file of shape 3 x H x W (three candidate
mask logit grids). Requests are serialized, never pipelined, and any
timeout, malformed line, or worker death raises BridgeError. The built-in
oracle decoder stands in for a real model during closed-loop tests: it
grades prompt quality through mask quality.
"""

from __future__ import annotations

import json
import queue
import shlex
import subprocess
import threading

import numpy as np

from .errors import ArgumentError, BridgeError
from .prompts import PromptSet
from .tensor import read_tensor

PROTOCOL_NAME = "cyclesam-decode"
PROTOCOL_VERSION = 1
CANDIDATES = 3
_LOGIT = 10.0


def dilate4(mask: np.ndarray) -> np.ndarray:
    """One 4-neighborhood dilation step on a binary grid."""
    m = mask.astype(bool)
    out = m.copy()
    out[1:, :] |= m[:-1, :]
    out[:-1, :] |= m[1:, :]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out.astype(np.uint8)


def erode4(mask: np.ndarray) -> np.ndarray:
    """One 4-neighborhood erosion step on a binary grid."""
    m = mask.astype(bool)
    out = m.copy()
    out[1:, :] &= m[:-1, :]
    out[:-1, :] &= m[1:, :]
    out[:, 1:] &= m[:, :-1]
    out[:, :-1] &= m[:, 1:]
    # edge cells lose their off-grid neighbor
    out[0, :] = False
    out[-1, :] = False
    out[:, 0] = False
    out[:, -1] = False
    return (out & m).astype(np.uint8)


def oracle_decode(gt: np.ndarray, prompts: PromptSet) -> np.ndarray:
    """Deterministic candidate masks graded against the ground truth.

    Candidate 1 reacts to prompt quality: without a positive inside the
    object it is empty; a negative inside the object shrinks it to the
    eroded object (exclusion); with no negatives at all it overshoots to the
    dilated object (nothing told the decoder where to stop); otherwise it is
    the object itself. Candidates 2 and 3 are the dilated and eroded object.
    Grids are +/-10 logits of shape 3 x H x W.
    """
    h, w = gt.shape
    if prompts.image_size != (w, h):
        raise ArgumentError(
            f"prompt extent {prompts.image_size} != gt extent {(w, h)}"
        )
    inside = lambda p: gt[p.y, p.x] != 0
    pos_in = any(inside(p) for p in prompts.positives)
    neg_in = any(inside(p) for p in prompts.negatives)
    dil = dilate4(gt)
    ero = erode4(gt)
    if not pos_in:
        m1 = np.zeros_like(gt)
    elif neg_in:
        m1 = ero
    elif not prompts.negatives:
        m1 = dil
    else:
        m1 = (gt != 0).astype(np.uint8)
    cands = np.stack([m1, dil, ero]).astype(np.float32)
    return (cands * 2.0 - 1.0) * _LOGIT


class OracleMaskDecoder:
    """In-process decoder backed by a ground-truth label mask."""

    def __init__(self, gt_mask: np.ndarray):
        self.gt_mask = np.asarray(gt_mask)

    def decode(self, image_ref: str, prompts: PromptSet) -> np.ndarray:
        gt = (self.gt_mask == prompts.class_id).astype(np.uint8)
        return oracle_decode(gt, prompts)

    def close(self):
        pass


class DecoderBridge:
    """Owns one worker process and serializes decode requests to it."""

    def __init__(self, command, timeout: float = 60.0):
        if isinstance(command, str):
            command = shlex.split(command)
        self._timeout = timeout
        self._next_id = 0
        self._lines: queue.Queue = queue.Queue()
        try:
            self._proc = subprocess.Popen(
                command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
            )
        except OSError as exc:
            raise BridgeError(f"cannot launch decoder worker {command!r}: {exc}") from exc
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        hello = self._read_line()
        if hello.get("protocol") != PROTOCOL_NAME or hello.get("version") != PROTOCOL_VERSION:
            self.close()
            raise BridgeError(f"bad handshake from worker: {hello!r}")

    def _pump(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _read_line(self) -> dict:
        try:
            line = self._lines.get(timeout=self._timeout)
        except queue.Empty:
            self.close()
            raise BridgeError(f"worker response timed out after {self._timeout}s")
        if line is None:
            code = self._proc.poll()
            err = self._stderr_tail()
            self.close()
            raise BridgeError(f"worker exited (code {code}) {err}")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            self.close()
            raise BridgeError(f"malformed worker line {line!r}: {exc}") from exc
        if not isinstance(obj, dict):
            self.close()
            raise BridgeError(f"worker line is not an object: {obj!r}")
        return obj

    def _stderr_tail(self) -> str:
        try:
            tail = (self._proc.stderr.read() or "").strip()
        except Exception:
            return ""
        return f"stderr: {tail[-500:]}" if tail else ""

    def decode(self, image_ref: str, prompts: PromptSet) -> np.ndarray:
        """One request/response round trip; returns 3 x H x W float32 logits."""
        if self._proc.poll() is not None:
            raise BridgeError(f"worker already exited (code {self._proc.returncode})")
        self._next_id += 1
        req = {"id": self._next_id, "image": str(image_ref), "prompts": prompts.to_json_dict()}
        try:
            self._proc.stdin.write(json.dumps(req) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self.close()
            raise BridgeError(f"worker pipe closed: {exc}") from exc
        resp = self._read_line()
        if resp.get("id") != self._next_id:
            self.close()
            raise BridgeError(f"response id {resp.get('id')} != request id {self._next_id}")
        if "error" in resp:
            raise BridgeError(f"worker error: {resp['error']}")
        path = resp.get("masks")
        if not isinstance(path, str):
            self.close()
            raise BridgeError(f"response names no mask file: {resp!r}")
        masks = read_tensor(path)
        w, h = prompts.image_size
        if masks.ndim != 3 or masks.shape != (CANDIDATES, h, w) or masks.dtype != np.float32:
            self.close()
            raise BridgeError(
                f"mask file has shape {masks.shape} dtype {masks.dtype}, "
                f"expected ({CANDIDATES}, {h}, {w}) float32"
            )
        return masks

    def close(self):
        proc = getattr(self, "_proc", None)
        if proc is None:
            return
        if proc.poll() is None:
            try:
                proc.stdin.close()
            except Exception:
                pass
            try:
                proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass
