"""Scene-difference captions for frame pairs.

Reference and target frames are sent to a multimodal captioner as one
side-by-side composite together with a few-shot prompt. Two clients share one
interface: a live HTTP client and a deterministic offline stub.
"""
import base64
import hashlib
import hmac
import io
import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Optional, Protocol

import numpy as np
import requests
from dotenv import load_dotenv
from PIL import Image
from tqdm import tqdm

from dataset_pipeline import read_image, resolve_asset
from utils.run_log import write_run_log
from utils.terminal_colors import print_error, print_warning

MAX_CAPTION_LENGTH = 300
DEFAULT_FEWSHOT_COUNT = 10

DEFAULT_PROMPT_TEMPLATE = (
    "The image shows two frames from the same video side by side. "
    "Describe in one present-tense sentence how the person's pose changes from the left frame to the right frame."
)

# Transient statuses are retried, everything else fails the request at once
RETRY_STATUS_CODES = {429, 500, 502, 503, 504}

# A sentence terminator followed by more text means more than one sentence
_SECOND_SENTENCE = re.compile(r'[.!?]["\')\]]*\s+\S')


class CaptionerError(Exception):
    pass


class TransientCaptionerError(CaptionerError):
    pass


class CaptionerUnavailable(CaptionerError):
    pass


class ValidationError(ValueError):
    pass


class UnknownPairId(KeyError):
    pass


@dataclass(frozen=True)
class CaptionRequest:
    composite_image: np.ndarray = field(repr=False)
    fewshot_examples: tuple = field(default=(), repr=False)
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    pair_id: str = ''


@dataclass(frozen=True)
class CaptionRecord:
    pair_id: str
    caption: str
    captioner_id: str
    created_at: str

    def to_dict(self):
        return asdict(self)


class CaptionClient(Protocol):
    captioner_id: str

    def caption(self, request: CaptionRequest) -> str:
        ...


def validate_caption(text) -> str:
    """Strip and check a captioner reply: one non-empty sentence, one line, <= 300 chars."""
    if not isinstance(text, str):
        raise ValidationError(f"caption must be a string, got {type(text).__name__}")
    caption = text.strip()
    if not caption:
        raise ValidationError("caption is empty")
    if len(caption) > MAX_CAPTION_LENGTH:
        raise ValidationError(f"caption is {len(caption)} characters, limit is {MAX_CAPTION_LENGTH}")
    if '\n' in caption or _SECOND_SENTENCE.search(caption):
        raise ValidationError(f"caption must be a single sentence: {caption!r}")
    return caption


def compose_side_by_side(reference: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Reference on the left, target on the right, at the reference height.

    The target is resized (aspect preserved) when heights differ; the
    reference half is copied untouched.
    """
    height = reference.shape[0]
    if target.shape[0] != height:
        width = max(1, round(target.shape[1] * height / target.shape[0]))
        target = np.asarray(Image.fromarray(target).resize((width, height), Image.BILINEAR), dtype=np.uint8)
    return np.concatenate([reference, target], axis=1)


def encode_png_base64(image: np.ndarray) -> str:
    buffer = io.BytesIO()
    Image.fromarray(image).save(buffer, format='PNG')
    return base64.b64encode(buffer.getvalue()).decode('ascii')


def load_prompt_template(path=None) -> str:
    if path is None or not os.path.isfile(path):
        return DEFAULT_PROMPT_TEMPLATE
    with open(path, 'r', encoding='utf-8') as template_file:
        template = template_file.read().strip()
    return template or DEFAULT_PROMPT_TEMPLATE


def default_fewshot_examples(n: int = DEFAULT_FEWSHOT_COUNT, height: int = 64):
    """Neutral placeholder exemplars: flat grey composites with generic captions.

    Real exemplars are dataset-specific and are not shipped.
    """
    examples = []
    for i in range(n):
        left = np.full((height, height, 3), 96 + 8 * i, dtype=np.uint8)
        right = np.full((height, height, 3), 160 - 8 * i, dtype=np.uint8)
        examples.append((np.concatenate([left, right], axis=1),
                         f"Placeholder example {i + 1} where the person shifts their weight and moves their arms."))
    return tuple(examples)


# --- clients -----------------------------------------------------------------------

_STUB_SUBJECTS = ("He", "She", "They")
_STUB_ACTIONS = (
    "raises the right arm above the head",
    "lowers both arms to the sides",
    "bends forward at the waist",
    "steps to the left",
    "turns the torso toward the camera",
    "lifts the left knee",
    "leans back slightly",
    "reaches down toward the ground",
)
_STUB_DETAILS = (
    "while keeping the feet planted",
    "and looks down at the hands",
    "while shifting weight onto one leg",
    "and spreads the fingers apart",
    "while holding the same object",
)


class StubCaptionClient:
    """Offline captioner: the caption is a pure function of (composite, template).

    fail_pair_ids lists pairs whose requests always fail transiently, for
    exercising retry and failure paths.
    """
    captioner_id = 'stub-v1'

    def __init__(self, fail_pair_ids=()):
        self.fail_pair_ids = frozenset(fail_pair_ids)

    def caption(self, request: CaptionRequest) -> str:
        if request.pair_id in self.fail_pair_ids:
            raise TransientCaptionerError(f"injected failure for {request.pair_id}")
        digest = hashlib.sha256()
        digest.update(str(request.composite_image.shape).encode('utf-8'))
        digest.update(np.ascontiguousarray(request.composite_image).tobytes())
        digest.update(request.prompt_template.encode('utf-8'))
        value = int.from_bytes(digest.digest()[:8], 'big')
        subject = _STUB_SUBJECTS[value % len(_STUB_SUBJECTS)]
        action = _STUB_ACTIONS[(value >> 8) % len(_STUB_ACTIONS)]
        detail = _STUB_DETAILS[(value >> 16) % len(_STUB_DETAILS)]
        return f"{subject} {action} {detail}."


def generate_signature(params, secret_key, api_operation):
    """HMAC-SHA256 over the operation path plus sorted key/value pairs"""
    concatenated_string = api_operation
    for k, v in sorted(params.items()):
        concatenated_string += f"{k}{v}"
    return hmac.new(secret_key.encode('utf-8'), concatenated_string.encode('utf-8'), hashlib.sha256).hexdigest().upper()


class HttpCaptionClient:
    """JSON-over-HTTP captioner.

    POST {"image": base64 PNG, "prompt": str, "fewshot": [{"image", "caption"}], "timestamp": ms}
    and expect {"caption": str}. The API key goes in a bearer header; when a
    secret is configured the payload is also signed.
    """
    captioner_id = 'http'

    def __init__(self, endpoint, api_key, secret=None, timeout=30.0, session=None, log_dir=None):
        self.endpoint = endpoint
        self.api_key = api_key
        self.secret = secret
        self.timeout = timeout
        self.session = session or requests.Session()
        self.log_dir = log_dir
        self.captioner_id = f"http:{endpoint}"

    @classmethod
    def from_env(cls, timeout=30.0, log_dir=None, session=None) -> "HttpCaptionClient":
        load_dotenv()
        endpoint = os.getenv('CAPTIONER_ENDPOINT')
        api_key = os.getenv('CAPTIONER_API_KEY')
        if not endpoint:
            raise CaptionerUnavailable("CAPTIONER_ENDPOINT is missing or not set in the environment/.env file")
        if not api_key:
            raise CaptionerUnavailable("CAPTIONER_API_KEY is missing or not set in the environment/.env file")
        return cls(endpoint, api_key, os.getenv('CAPTIONER_SECRET'), timeout, session, log_dir)

    def caption(self, request: CaptionRequest) -> str:
        payload = {
            "image": encode_png_base64(request.composite_image),
            "prompt": request.prompt_template,
            "fewshot": [{"image": encode_png_base64(img), "caption": text} for img, text in request.fewshot_examples],
            "timestamp": str(int(time.time() * 1000)),
        }
        headers = {'Authorization': f"Bearer {self.api_key}", 'Content-Type': 'application/json'}
        if self.secret:
            signed = {"prompt": payload["prompt"], "timestamp": payload["timestamp"],
                      "image_sha256": hashlib.sha256(payload["image"].encode('ascii')).hexdigest()}
            headers['X-Signature'] = generate_signature(signed, self.secret, self.endpoint)

        request_log = {
            "Request URL": self.endpoint,
            "Request Method": "POST",
            "Pair ID": request.pair_id,
            "Few-shot Examples": len(request.fewshot_examples),
            "Prompt": request.prompt_template,
        }
        try:
            response = self.session.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
        except (requests.exceptions.ConnectionError, requests.exceptions.Timeout) as e:
            write_run_log(self.log_dir, 'captioning.py', request_log, {"Error": str(e)}, prefix='caption_request')
            raise TransientCaptionerError(f"request error: {e}") from e

        try:
            response_data = response.json()
        except ValueError:
            response_data = {"raw": response.text[:500]}
        write_run_log(self.log_dir, 'captioning.py', request_log, {
            "Response Status Code": response.status_code,
            "Response Body": response_data,
        }, prefix='caption_request')

        if response.status_code in RETRY_STATUS_CODES:
            raise TransientCaptionerError(f"captioner returned status {response.status_code}")
        if response.status_code != 200:
            raise CaptionerError(f"captioner returned status {response.status_code}: {response_data}")
        if not isinstance(response_data, dict) or 'caption' not in response_data:
            raise ValidationError(f"response has no caption field: {response_data}")
        return response_data['caption']


def request_caption(request: CaptionRequest, client: CaptionClient, retries: int = 3,
                    backoff: float = 1.0, sleep=time.sleep) -> CaptionRecord:
    """Ask the client for a caption, retrying transient failures with exponential backoff."""
    attempt = 0
    while True:
        try:
            text = client.caption(request)
            break
        except TransientCaptionerError as e:
            if attempt >= retries:
                raise CaptionerUnavailable(f"{request.pair_id}: gave up after {attempt + 1} attempts: {e}") from e
            sleep(backoff * (2 ** attempt))
            attempt += 1
    return CaptionRecord(
        pair_id=request.pair_id,
        caption=validate_caption(text),
        captioner_id=client.captioner_id,
        created_at=datetime.now(timezone.utc).isoformat(timespec='seconds'),
    )


def build_caption_request(record, manifest_path, prompt_template, fewshot_examples) -> CaptionRequest:
    reference = read_image(resolve_asset(manifest_path, record.reference_path))
    target = read_image(resolve_asset(manifest_path, record.target_path))
    return CaptionRequest(compose_side_by_side(reference, target), tuple(fewshot_examples),
                          prompt_template, record.pair_id)


def caption_manifest(records, manifest_path, client: CaptionClient, prompt_template=DEFAULT_PROMPT_TEMPLATE,
                     fewshot_examples=(), retries=3, backoff=1.0, max_in_flight=4, overwrite=True,
                     sleep=time.sleep):
    """Caption every record (or only uncaptioned ones when overwrite is False).

    At most max_in_flight requests run at once. Failures do not stop the
    batch; they are returned as (pair_id, message) next to the successes.
    """
    todo = [r for r in records if overwrite or not r.caption]

    def run(record):
        try:
            request = build_caption_request(record, manifest_path, prompt_template, fewshot_examples)
            return request_caption(request, client, retries, backoff, sleep), None
        except (CaptionerError, ValidationError, OSError) as e:
            return None, (record.pair_id, f"{type(e).__name__}: {e}")

    caption_records, failures = [], []
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        for caption_record, failure in tqdm(pool.map(run, todo), total=len(todo), desc="Captioning", unit="pair"):
            if failure:
                print_error(f"Caption failed for {failure[0]}: {failure[1]}")
                failures.append(failure)
            else:
                caption_records.append(caption_record)
    return caption_records, failures


def attach_captions(records, caption_records):
    """Write captions into matching manifest records; order and count are preserved.

    Duplicate pair ids: the last caption wins and a warning is printed.
    """
    position = {record.pair_id: i for i, record in enumerate(records)}
    updated = list(records)
    seen = set()
    for caption_record in caption_records:
        if caption_record.pair_id not in position:
            raise UnknownPairId(caption_record.pair_id)
        if caption_record.pair_id in seen:
            print_warning(f"Duplicate caption for {caption_record.pair_id}, keeping the last one")
        seen.add(caption_record.pair_id)
        i = position[caption_record.pair_id]
        updated[i] = updated[i].with_caption(caption_record.caption)
    return updated


def write_caption_records(path, caption_records):
    with open(path, 'w', encoding='utf-8', newline='\n') as records_file:
        for caption_record in caption_records:
            records_file.write(json.dumps(caption_record.to_dict(), ensure_ascii=False) + '\n')
    return path


def read_caption_records(path):
    caption_records = []
    with open(path, 'r', encoding='utf-8') as records_file:
        for line_number, line in enumerate(records_file, 1):
            if not line.strip():
                continue
            try:
                caption_records.append(CaptionRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as e:
                raise ValidationError(f"{path}:{line_number}: {e}") from e
    return caption_records
