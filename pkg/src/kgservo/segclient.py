"""HTTP client for the segmentation sidecar.

Speaks the sidecar wire protocol: POST /segment with a base64 PNG image
and a text prompt, receiving a base64 8-bit grayscale PNG mask of the
same dimensions.  From the pipeline's point of view the sidecar is
interchangeable with simulator masks.
"""

from __future__ import annotations

import base64
import io
import json
import urllib.error
import urllib.request

import numpy as np
from PIL import Image

from . import sim
from .perception import BinaryMask


class SidecarError(Exception):
    pass


def encode_image_png(image: np.ndarray) -> str:
    """Grayscale float [0,1] (or uint8) image to base64 PNG text."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_mask_png(data_b64: str) -> np.ndarray:
    """Base64 PNG text to a float mask in [0,1]."""
    try:
        raw = base64.b64decode(data_b64, validate=True)
        img = Image.open(io.BytesIO(raw)).convert("L")
    except Exception as exc:
        raise SidecarError(f"cannot decode mask PNG: {exc}") from exc
    return np.asarray(img, dtype=float) / 255.0


class SidecarClient:
    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url.rstrip("/")
        self.timeout = timeout

    def _post(self, path: str, payload: dict) -> dict:
        req = urllib.request.Request(
            self.url + path,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", "replace")
            raise SidecarError(f"sidecar returned {exc.code}: {detail}") from exc
        except (urllib.error.URLError, json.JSONDecodeError) as exc:
            raise SidecarError(f"sidecar request failed: {exc}") from exc

    def health(self) -> dict:
        try:
            with urllib.request.urlopen(
                self.url + "/health", timeout=self.timeout
            ) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, json.JSONDecodeError) as exc:
            raise SidecarError(f"sidecar health check failed: {exc}") from exc

    def segment(
        self, image: np.ndarray, prompt: str, threshold: float | None = None
    ) -> BinaryMask:
        payload = {"image": encode_image_png(image), "prompt": prompt}
        if threshold is not None:
            payload["threshold"] = threshold
        reply = self._post("/segment", payload)
        if "mask" not in reply:
            raise SidecarError(f"sidecar reply lacks a mask field: {reply}")
        values = decode_mask_png(reply["mask"])
        if values.shape != np.asarray(image).shape[:2]:
            raise SidecarError(
                f"mask shape {values.shape} != image shape {np.asarray(image).shape[:2]}"
            )
        return BinaryMask(values, prompt=prompt)


class SidecarSegmenter:
    """Segmenter backend that ships rendered camera images to the sidecar."""

    def __init__(self, url: str, scene: sim.Scene, threshold: float | None = None):
        self.client = SidecarClient(url)
        self.scene = scene
        self.threshold = threshold

    def masks(self, pose, prompts):
        image = sim.render_scene_image(self.scene.camera, pose, self.scene)
        return {
            prompt: self.client.segment(image, prompt, self.threshold)
            for prompt in prompts
        }
