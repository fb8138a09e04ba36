"""
Input Validation Module for Silhouette Lab.
Checks scene descriptors, camera descriptors, fit layouts and command-line
options before any rendering or optimisation runs, so malformed inputs are
rejected early with a message naming what is wrong.
"""

import logging
import math

logger = logging.getLogger(__name__)

# ────────────── REQUIRED KEYS ──────────────

_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "rotation", "translation")

_OBJECT_KEYS = ("kind", "scale", "yaw_deg", "position")

_SCENE_KEYS = ("scene_id", "seed", "objects", "cameras")

_LAYOUT_KEYS = ("z", "rho", "box")


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _number_list(value, length):
    return isinstance(value, list) and len(value) == length and all(_is_number(v) for v in value)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# 1. CAMERA DESCRIPTORS
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━

def validate_camera_descriptor(data):
    """
    Validate one serialized camera.

    Checks:
      - All intrinsic and pose keys present
      - Positive focal lengths, image at least 1x1
      - rotation has 9 numbers (row-major), translation has 3

    Returns:
        (is_valid: bool, error_message: str)
    """
    if not isinstance(data, dict):
        return False, "Camera descriptor must be a JSON object."

    missing = [k for k in _CAMERA_KEYS if k not in data]
    if missing:
        return False, f"Camera descriptor is missing keys: {', '.join(missing)}."

    if not all(_is_number(data[k]) for k in ("fx", "fy", "cx", "cy")):
        return False, "Camera intrinsics fx, fy, cx, cy must be finite numbers."
    if data["fx"] <= 0 or data["fy"] <= 0:
        return False, "Camera focal lengths must be positive."

    if not all(isinstance(data[k], int) and not isinstance(data[k], bool) for k in ("width", "height")):
        return False, "Camera width and height must be integers."
    if data["width"] < 1 or data["height"] < 1:
        return False, "Camera image size must be at least 1x1."

    if not _number_list(data["rotation"], 9):
        return False, "Camera rotation must be a list of 9 numbers (row-major 3x3)."
    if not _number_list(data["translation"], 3):
        return False, "Camera translation must be a list of 3 numbers."

    return True, ""


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# 2. SCENE DESCRIPTORS
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━

def validate_scene_descriptor(data, kinds=None):
    """
    Validate a scene.json document.

    Checks:
      - Top-level keys present
      - Every object has a known kind, positive scale and a 3D position
      - At least 2 cameras, each of them valid

    Returns:
        (is_valid: bool, error_message: str)
    """
    if not isinstance(data, dict):
        return False, "Scene descriptor must be a JSON object."

    missing = [k for k in _SCENE_KEYS if k not in data]
    if missing:
        return False, f"Scene descriptor is missing keys: {', '.join(missing)}."

    objects = data["objects"]
    if not isinstance(objects, list) or not objects:
        return False, "Scene descriptor must list at least one object."

    for o, obj in enumerate(objects):
        if not isinstance(obj, dict):
            return False, f"Object {o} must be a JSON object."
        absent = [k for k in _OBJECT_KEYS if k not in obj]
        if absent:
            return False, f"Object {o} is missing keys: {', '.join(absent)}."
        if kinds is not None and obj["kind"] not in kinds:
            return False, f"Object {o} has unknown kind {obj['kind']!r}."
        if not _number_list(obj["scale"], 3) or min(obj["scale"]) <= 0:
            return False, f"Object {o} scale must be 3 positive numbers."
        if not _number_list(obj["position"], 3):
            return False, f"Object {o} position must be 3 numbers."
        if not _is_number(obj["yaw_deg"]):
            return False, f"Object {o} yaw must be a number."

    cameras = data["cameras"]
    if not isinstance(cameras, list) or len(cameras) < 2:
        return False, "Scene descriptor must list at least 2 cameras."
    for j, cam in enumerate(cameras):
        ok, message = validate_camera_descriptor(cam)
        if not ok:
            return False, f"Camera {j}: {message}"

    return True, ""


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# 3. FIT LAYOUTS
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━

def validate_layout_descriptor(data):
    """
    Validate a layout.json written by a fit.

    Returns:
        (is_valid: bool, error_message: str)
    """
    if not isinstance(data, dict) or not isinstance(data.get("objects"), list):
        return False, "Layout file must be a JSON object with an 'objects' list."
    if not isinstance(data.get("views_used"), int) or data["views_used"] < 1:
        return False, "Layout file must record views_used as a positive integer."

    for o, obj in enumerate(data["objects"]):
        absent = [k for k in _LAYOUT_KEYS if k not in obj]
        if absent:
            return False, f"Layout object {o} is missing keys: {', '.join(absent)}."
        if not (_is_number(obj["z"]) and _is_number(obj["rho"])):
            return False, f"Layout object {o} needs numeric z and rho."
        if obj["rho"] <= 0 or obj["z"] - obj["rho"] / 2.0 <= 0:
            return False, f"Layout object {o} does not describe a frustum in front of the camera."
        box = obj["box"]
        if not _number_list(box, 4) or not (box[0] < box[2] and box[1] < box[3]):
            return False, f"Layout object {o} box must be [x0, y0, x1, y1] with x0 < x1 and y0 < y1."

    return True, ""


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# 4. FIT OPTIONS
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━

def validate_fit_options(views, iterations, lr, points, available_views, allow_single_view=False):
    """
    Range checks for the fit command.

    Checks:
      - 2 or more views unless single-view fitting was explicitly allowed
      - no more views than the bundle holds
      - positive iteration count, learning rate and point count

    Returns:
        (is_valid: bool, error_message: str)
    """
    if views < 1:
        return False, "--views must be at least 1."
    if views == 1 and not allow_single_view:
        return False, "Fitting from a single view needs --allow-single-view; use 2 or more views."
    if views > available_views:
        return False, f"--views {views} exceeds the {available_views} views stored in the scene."
    if iterations < 0:
        return False, "--iters must be non-negative."
    if not lr > 0:
        return False, "--lr must be positive."
    if points < 1:
        return False, "--points must be at least 1."

    if views == 1:
        logger.warning("Fitting from a single view: depth is unconstrained by the loss")
    return True, ""
