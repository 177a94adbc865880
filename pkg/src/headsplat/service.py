"""Live puppeteering service: HTTP control plane plus a persistent binary
frame stream.

Endpoints:
    GET  /meta    bundle/runtime info, counters, and the current state.
    POST /state   partial state patch; invalid fields reject the whole patch.
    GET  /frames  stream of frame messages, one per applied state sequence.

Frame message layout (little-endian):
    magic "FRME" | u64 sequence | u32 width | u32 height |
    width*height*3 bytes RGB8 (gamma-encoded) |
    u32 trailer length | trailer JSON (stage timings, microseconds)

Frames are rendered only when the state sequence advances; patches arriving
during a render coalesce, and skipped sequences are counted in /meta.  Frame
bytes are a pure function of (bundle, state), so every client observing a
sequence number sees identical bytes.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .blending import FRAME_STAGES
from .bundle import AvatarBundle
from .render import RenderConfig, encode_srgb_u8
from .runtime import AvatarRuntime

FRAME_MAGIC = b"FRME"


class PatchError(ValueError):
    """Rejected state patch; ``fields`` maps each offending field to a reason."""

    def __init__(self, fields: dict[str, str]):
        super().__init__(f"invalid patch fields: {sorted(fields)}")
        self.fields = fields


@dataclass(frozen=True)
class PuppetState:
    """Validated puppeteering state; ``sequence`` increases per applied patch."""

    weights: dict = field(default_factory=dict)
    yaw: float = 0.0
    pitch: float = 0.0
    distance: float = 3.2
    band_width: int = 16
    step: int = 4
    width: int = 256
    height: int = 256
    sequence: int = 0

    def to_json_dict(self) -> dict:
        return {
            "weights": dict(self.weights),
            "yaw": self.yaw,
            "pitch": self.pitch,
            "distance": self.distance,
            "band_width": self.band_width,
            "step": self.step,
            "width": self.width,
            "height": self.height,
            "sequence": self.sequence,
        }


_PATCH_FIELDS = ("weights", "yaw", "pitch", "distance", "band_width", "step", "width", "height")


def apply_update(state: PuppetState, patch: dict, known_weights=None) -> PuppetState:
    """Merge a partial patch into the state (last writer wins).

    All fields are validated before anything is applied; any invalid field
    rejects the entire patch.  An empty patch returns the state unchanged
    (same sequence).

    Raises:
        PatchError: listing every offending field.
    """
    if not isinstance(patch, dict):
        raise PatchError({"patch": "must be a JSON object"})
    errors: dict[str, str] = {}
    unknown = set(patch) - set(_PATCH_FIELDS)
    for name in unknown:
        errors[name] = "unknown field"

    updates: dict = {}
    if "weights" in patch and "weights" not in errors:
        weights = patch["weights"]
        if not isinstance(weights, dict):
            errors["weights"] = "must be an object of name -> weight"
        else:
            merged = dict(state.weights)
            for name, value in weights.items():
                if known_weights is not None and name not in known_weights:
                    errors[f"weights.{name}"] = "unknown blendshape"
                elif not isinstance(value, (int, float)) or not 0.0 <= float(value) <= 1.0:
                    errors[f"weights.{name}"] = "weight must be in [0, 1]"
                else:
                    merged[name] = float(value)
            updates["weights"] = merged

    def number(name, lo, hi, cast=float):
        if name not in patch:
            return
        value = patch[name]
        if not isinstance(value, (int, float)) or not np.isfinite(value):
            errors[name] = "must be a finite number"
        elif not lo <= value <= hi:
            errors[name] = f"must be in [{lo}, {hi}]"
        else:
            updates[name] = cast(value)

    number("yaw", -1e6, 1e6)
    number("pitch", -89.0, 89.0)
    number("distance", 0.011, 1e6)  # must stay beyond the near plane
    number("band_width", 0, 4096, int)
    number("step", 1, 4096, int)
    number("width", 16, 4096, int)
    number("height", 16, 4096, int)

    if errors:
        raise PatchError(errors)
    if not updates:
        return state
    return replace(state, **updates, sequence=state.sequence + 1)


def encode_frame(sequence: int, image_u8: np.ndarray, stages: dict, total_us: float) -> bytes:
    h, w = image_u8.shape[:2]
    trailer = json.dumps(
        {"sequence": sequence, "stages": stages, "total_us": total_us}
    ).encode("utf-8")
    return b"".join(
        [
            FRAME_MAGIC,
            struct.pack("<QII", sequence, w, h),
            image_u8.tobytes(),
            struct.pack("<I", len(trailer)),
            trailer,
        ]
    )


def decode_frame(buffer: bytes, offset: int = 0):
    """Parse one frame message; returns (frame dict, next offset) or None if
    the buffer does not yet hold a complete message."""
    head = struct.calcsize("<4sQII")
    if len(buffer) - offset < head:
        return None
    magic, seq, w, h = struct.unpack_from("<4sQII", buffer, offset)
    if magic != FRAME_MAGIC:
        raise ValueError(f"bad frame magic {magic!r} at offset {offset}")
    pixel_end = offset + head + w * h * 3
    if len(buffer) < pixel_end + 4:
        return None
    (trailer_len,) = struct.unpack_from("<I", buffer, pixel_end)
    end = pixel_end + 4 + trailer_len
    if len(buffer) < end:
        return None
    pixels = np.frombuffer(buffer[offset + head : pixel_end], dtype=np.uint8).reshape(h, w, 3)
    trailer = json.loads(buffer[pixel_end + 4 : end].decode("utf-8"))
    return {"sequence": seq, "width": w, "height": h, "pixels": pixels, "trailer": trailer}, end


class PuppetService:
    """One avatar, one renderer thread, many stream readers."""

    def __init__(
        self,
        bundle: AvatarBundle,
        host: str = "127.0.0.1",
        port: int = 0,
        config: RenderConfig = RenderConfig(),
        initial_state: PuppetState | None = None,
        face_step: int | None = None,
    ):
        self.bundle = bundle
        self.config = config
        self._state = initial_state or PuppetState(band_width=bundle.band_width)
        self._face_step = face_step
        self._lock = threading.Lock()
        self._wake = threading.Condition(self._lock)
        self._published = threading.Condition()
        self._latest: tuple[int, bytes] | None = None
        self._stop = False
        self._counters = {"applied_updates": 0, "rendered_frames": 0, "skipped_sequences": 0}
        self._runtime: AvatarRuntime | None = None
        self._runtime_key = None
        self._host, self._port = host, port
        self._server: ThreadingHTTPServer | None = None
        self._threads: list[threading.Thread] = []
        self._blendshapes = sorted(bundle.blendshapes)

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> tuple[str, int]:
        """Bind, start the renderer, and block until the first frame exists."""
        service = self
        self._get_runtime(self._state)  # build the static cache up front

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # tests stay quiet
                pass

            def do_GET(self):
                if self.path == "/meta":
                    service._handle_meta(self)
                elif self.path == "/frames":
                    service._handle_frames(self)
                else:
                    self.send_error(404)

            def do_POST(self):
                if self.path == "/state":
                    service._handle_state(self)
                else:
                    self.send_error(404)

        self._server = ThreadingHTTPServer((self._host, self._port), Handler)
        self._server.daemon_threads = True
        renderer = threading.Thread(target=self._render_loop, name="puppet-renderer", daemon=True)
        http_thread = threading.Thread(
            target=self._server.serve_forever, name="puppet-http", daemon=True
        )
        self._threads = [renderer, http_thread]
        renderer.start()
        http_thread.start()
        with self._published:
            while self._latest is None:
                self._published.wait(timeout=0.1)
        return self._server.server_address

    def stop(self) -> None:
        with self._wake:
            self._stop = True
            self._wake.notify_all()
        with self._published:
            self._published.notify_all()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        for t in self._threads:
            t.join(timeout=5)

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address if self._server else (self._host, self._port)

    # -- state / rendering ----------------------------------------------------

    def apply_patch(self, patch: dict) -> PuppetState:
        with self._wake:
            new_state = apply_update(self._state, patch, known_weights=self._blendshapes)
            if new_state.sequence != self._state.sequence:
                self._state = new_state
                self._counters["applied_updates"] += 1
                self._wake.notify_all()
            return self._state

    def current_state(self) -> PuppetState:
        with self._lock:
            return self._state

    def _get_runtime(self, state: PuppetState) -> AvatarRuntime:
        # Sampling step and band width reshape the static cache; rebuild only
        # when one of them changes.
        key = (state.step, state.band_width)
        if self._runtime_key != key:
            bundle = self.bundle
            if state.band_width != bundle.band_width:
                bundle = replace(bundle, band_width=state.band_width)
            face_step = self._face_step or max(1, state.step // 2)
            self._runtime = AvatarRuntime(
                bundle, step=state.step, face_step=face_step, config=self.config
            )
            self._runtime_key = key
        return self._runtime

    def _render_state(self, state: PuppetState) -> bytes:
        runtime = self._get_runtime(state)
        camera = runtime.orbit_view(state.yaw, state.pitch, state.distance, state.width, state.height)
        result = runtime.render_frame(state.weights, camera)
        return encode_frame(
            state.sequence,
            encode_srgb_u8(result.image),
            dict(result.timing.stages),
            result.timing.total_us,
        )

    def _render_loop(self) -> None:
        rendered_seq = -1
        while True:
            with self._wake:
                while not self._stop and self._state.sequence <= rendered_seq:
                    self._wake.wait()
                if self._stop:
                    return
                state = self._state
            frame = self._render_state(state)
            with self._published:
                if rendered_seq >= 0 and state.sequence > rendered_seq + 1:
                    self._counters["skipped_sequences"] += state.sequence - rendered_seq - 1
                rendered_seq = state.sequence
                self._counters["rendered_frames"] += 1
                self._latest = (state.sequence, frame)
                self._published.notify_all()

    # -- HTTP handlers ---------------------------------------------------------

    def _handle_meta(self, handler: BaseHTTPRequestHandler) -> None:
        with self._lock:
            state = self._state
        body = json.dumps(
            {
                "blendshapes": self._blendshapes,
                "resolution": {"width": state.width, "height": state.height},
                "stages": list(FRAME_STAGES),
                "state": state.to_json_dict(),
                "counters": dict(self._counters),
                "atlas_resolution": list(self.bundle.resolution),
            }
        ).encode("utf-8")
        handler.send_response(200)
        handler.send_header("Content-Type", "application/json")
        handler.send_header("Content-Length", str(len(body)))
        handler.send_header("Access-Control-Allow-Origin", "*")
        handler.end_headers()
        handler.wfile.write(body)

    def _handle_state(self, handler: BaseHTTPRequestHandler) -> None:
        length = int(handler.headers.get("Content-Length", "0"))
        try:
            patch = json.loads(handler.rfile.read(length).decode("utf-8"))
        except json.JSONDecodeError:
            self._reply_json(handler, 400, {"error": "invalid JSON body"})
            return
        try:
            state = self.apply_patch(patch)
        except PatchError as exc:
            self._reply_json(handler, 400, {"error": "invalid patch", "fields": exc.fields})
            return
        self._reply_json(handler, 200, state.to_json_dict())

    @staticmethod
    def _reply_json(handler: BaseHTTPRequestHandler, code: int, doc: dict) -> None:
        body = json.dumps(doc).encode("utf-8")
        handler.send_response(code)
        handler.send_header("Content-Type", "application/json")
        handler.send_header("Content-Length", str(len(body)))
        handler.send_header("Access-Control-Allow-Origin", "*")
        handler.end_headers()
        handler.wfile.write(body)

    def _handle_frames(self, handler: BaseHTTPRequestHandler) -> None:
        handler.send_response(200)
        handler.send_header("Content-Type", "application/octet-stream")
        handler.send_header("Access-Control-Allow-Origin", "*")
        handler.end_headers()
        sent_seq = -1
        while True:
            with self._published:
                while self._latest is None or (self._latest[0] <= sent_seq and not self._stop):
                    self._published.wait(timeout=0.5)
                    if self._stop:
                        return
                if self._stop:
                    return
                seq, frame = self._latest
            try:
                handler.wfile.write(frame)
                handler.wfile.flush()
            except (BrokenPipeError, ConnectionResetError):
                return
            sent_seq = seq


def serve(bundle: AvatarBundle, host: str, port: int, config: RenderConfig = RenderConfig()) -> None:
    """Blocking convenience wrapper used by the CLI ``serve`` subcommand."""
    service = PuppetService(bundle, host=host, port=port, config=config)
    host, port = service.start()
    print(f"puppet service listening on http://{host}:{port}")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
