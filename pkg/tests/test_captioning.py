import json
import os

import numpy as np
import pytest
import requests
from hypothesis import given
from hypothesis import strategies as st

from captioning import (
    DEFAULT_PROMPT_TEMPLATE,
    MAX_CAPTION_LENGTH,
    CaptionerError,
    CaptionerUnavailable,
    CaptionRecord,
    CaptionRequest,
    HttpCaptionClient,
    StubCaptionClient,
    TransientCaptionerError,
    UnknownPairId,
    ValidationError,
    attach_captions,
    caption_manifest,
    compose_side_by_side,
    default_fewshot_examples,
    generate_signature,
    load_prompt_template,
    read_caption_records,
    request_caption,
    validate_caption,
    write_caption_records,
)
from dataset_pipeline import build_dataset
from tools.make_synthetic_videos import make_fixture


@pytest.fixture
def manifest(tmp_path):
    frames_dir, poses_dir = make_fixture(tmp_path / 'data')
    manifest_path = str(tmp_path / 'out' / 'manifest.jsonl')
    return manifest_path, build_dataset(frames_dir, poses_dir, manifest_path)


def request(pair_id='walk:000000:000005', value=100):
    return CaptionRequest(np.full((8, 16, 3), value, dtype=np.uint8), (), DEFAULT_PROMPT_TEMPLATE, pair_id)


class FlakyClient:
    """Fails transiently `failures` times, then answers."""
    captioner_id = 'flaky'

    def __init__(self, failures, reply="She lifts the left knee."):
        self.failures = failures
        self.reply = reply
        self.calls = 0

    def caption(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransientCaptionerError("busy")
        return self.reply


class FakeResponse:
    def __init__(self, status_code, data=None, text=''):
        self.status_code = status_code
        self._data = data
        self.text = text

    def json(self):
        if self._data is None:
            raise ValueError("no JSON")
        return self._data


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({'url': url, 'json': json, 'headers': headers, 'timeout': timeout})
        response = self.responses.pop(0)
        if isinstance(response, Exception):
            raise response
        return response


class TestValidateCaption:
    def test_strips_whitespace(self):
        assert validate_caption("  He steps to the left.\n") == "He steps to the left."

    @pytest.mark.parametrize('text', ['', '   ', 'He turns.\nShe waves.', 'He turns. She waves.', None])
    def test_rejects(self, text):
        with pytest.raises(ValidationError):
            validate_caption(text)

    def test_length_limit(self):
        assert validate_caption('a' * MAX_CAPTION_LENGTH) == 'a' * MAX_CAPTION_LENGTH
        with pytest.raises(ValidationError):
            validate_caption('a' * (MAX_CAPTION_LENGTH + 1))

    def test_abbreviation_free_single_sentence(self):
        assert validate_caption("He raises the arm to 90 degrees!") == "He raises the arm to 90 degrees!"


class TestComposite:
    def test_reference_left_target_right(self):
        reference = np.zeros((4, 3, 3), dtype=np.uint8)
        target = np.full((4, 5, 3), 255, dtype=np.uint8)
        composite = compose_side_by_side(reference, target)
        assert composite.shape == (4, 8, 3)
        assert np.array_equal(composite[:, :3], reference)
        assert np.all(composite[:, 3:] == 255)

    def test_target_resized_to_reference_height(self):
        reference = np.zeros((4, 4, 3), dtype=np.uint8)
        target = np.full((8, 6, 3), 50, dtype=np.uint8)
        assert compose_side_by_side(reference, target).shape == (4, 7, 3)

    def test_fewshot_examples(self):
        examples = default_fewshot_examples()
        assert len(examples) == 10
        assert all(image.shape == (64, 128, 3) and validate_caption(text) for image, text in examples)

    def test_prompt_template_falls_back(self, tmp_path):
        assert load_prompt_template(None) == DEFAULT_PROMPT_TEMPLATE
        assert load_prompt_template(tmp_path / 'missing.txt') == DEFAULT_PROMPT_TEMPLATE
        path = tmp_path / 'prompt.txt'
        path.write_text('Describe the change.\n', encoding='utf-8')
        assert load_prompt_template(path) == 'Describe the change.'


class TestStubClient:
    def test_deterministic_and_valid(self):
        client = StubCaptionClient()
        first = client.caption(request())
        assert first == StubCaptionClient().caption(request())
        assert validate_caption(first) == first

    @given(st.integers(min_value=0, max_value=255))
    def test_always_a_single_sentence(self, value):
        text = StubCaptionClient().caption(request(value=value))
        assert validate_caption(text) == text

    def test_depends_on_template(self):
        client = StubCaptionClient()
        outputs = {client.caption(CaptionRequest(request().composite_image, (), f"template {i}", 'p'))
                   for i in range(20)}
        assert len(outputs) > 1

    def test_injected_failure(self):
        with pytest.raises(TransientCaptionerError):
            StubCaptionClient(fail_pair_ids={'p'}).caption(request('p'))


class TestRequestCaption:
    def test_retries_with_exponential_backoff(self):
        sleeps = []
        client = FlakyClient(failures=2)
        record = request_caption(request(), client, retries=3, backoff=0.5, sleep=sleeps.append)
        assert sleeps == [0.5, 1.0]
        assert client.calls == 3
        assert record.caption == "She lifts the left knee."
        assert record.captioner_id == 'flaky'
        assert record.pair_id == 'walk:000000:000005'

    def test_gives_up(self):
        sleeps = []
        client = FlakyClient(failures=10)
        with pytest.raises(CaptionerUnavailable):
            request_caption(request(), client, retries=2, backoff=1.0, sleep=sleeps.append)
        assert client.calls == 3
        assert sleeps == [1.0, 2.0]

    def test_invalid_reply_is_not_retried(self):
        client = FlakyClient(failures=0, reply="One. Two.")
        with pytest.raises(ValidationError):
            request_caption(request(), client, sleep=lambda s: None)
        assert client.calls == 1


class TestCaptionManifest:
    def test_stub_captions_every_pair(self, manifest):
        manifest_path, records = manifest
        caption_records, failures = caption_manifest(records, manifest_path, StubCaptionClient(),
                                                     sleep=lambda s: None)
        assert failures == []
        assert [r.pair_id for r in caption_records] == [r.pair_id for r in records]
        captioned = attach_captions(records, caption_records)
        assert all(r.caption for r in captioned)

    def test_one_failing_pair(self, manifest):
        manifest_path, records = manifest
        failing = records[3].pair_id
        sleeps = []
        caption_records, failures = caption_manifest(
            records, manifest_path, StubCaptionClient(fail_pair_ids={failing}),
            retries=2, backoff=1.0, sleep=sleeps.append)
        assert len(caption_records) == len(records) - 1
        assert [pair_id for pair_id, _ in failures] == [failing]
        assert failures[0][1].startswith('CaptionerUnavailable')
        assert sorted(sleeps) == [1.0, 2.0]
        captioned = attach_captions(records, caption_records)
        assert len(captioned) == len(records)
        assert captioned[3].caption is None

    def test_without_overwrite_only_uncaptioned(self, manifest):
        manifest_path, records = manifest
        records = [r.with_caption("He waves.") if i % 2 == 0 else r for i, r in enumerate(records)]
        caption_records, _ = caption_manifest(records, manifest_path, StubCaptionClient(), overwrite=False,
                                              sleep=lambda s: None)
        assert [r.pair_id for r in caption_records] == [r.pair_id for r in records[1::2]]

    def test_stub_is_stable_across_runs(self, manifest):
        manifest_path, records = manifest
        first, _ = caption_manifest(records, manifest_path, StubCaptionClient(), max_in_flight=1)
        second, _ = caption_manifest(records, manifest_path, StubCaptionClient(), max_in_flight=4)
        assert [r.caption for r in first] == [r.caption for r in second]


class TestAttachCaptions:
    def record(self, pair_id, caption):
        return CaptionRecord(pair_id, caption, 'stub-v1', '2024-01-01T00:00:00+00:00')

    def test_last_duplicate_wins(self, manifest, capsys):
        _, records = manifest
        pair_id = records[0].pair_id
        updated = attach_captions(records, [self.record(pair_id, "He sits."), self.record(pair_id, "He stands.")])
        assert updated[0].caption == "He stands."
        assert 'Duplicate caption' in capsys.readouterr().err

    def test_unknown_pair_id(self, manifest):
        _, records = manifest
        with pytest.raises(UnknownPairId):
            attach_captions(records, [self.record('other:000000:000001', "He sits.")])

    def test_records_file_round_trip(self, tmp_path):
        path = tmp_path / 'captions.jsonl'
        caption_records = [self.record('a:000000:000001', "He sits."), self.record('a:000001:000000', "He stands.")]
        write_caption_records(path, caption_records)
        assert read_caption_records(path) == caption_records


class TestHttpClient:
    def client(self, session, secret=None, log_dir=None):
        return HttpCaptionClient('https://captioner.example/v1/caption', 'key-123', secret, timeout=5.0,
                                 session=session, log_dir=log_dir)

    def test_success(self):
        session = FakeSession([FakeResponse(200, {"caption": "She bends forward at the waist."})])
        text = self.client(session).caption(request())
        assert text == "She bends forward at the waist."
        call = session.calls[0]
        assert call['headers']['Authorization'] == 'Bearer key-123'
        assert 'X-Signature' not in call['headers']
        assert call['timeout'] == 5.0
        assert set(call['json']) == {'image', 'prompt', 'fewshot', 'timestamp'}

    def test_signature_header(self):
        session = FakeSession([FakeResponse(200, {"caption": "He turns."})])
        self.client(session, secret='s3cret').caption(request())
        signature = session.calls[0]['headers']['X-Signature']
        assert signature == signature.upper() and len(signature) == 64

    @pytest.mark.parametrize('response', [
        FakeResponse(429, {"error": "slow down"}),
        FakeResponse(503, None, 'unavailable'),
        requests.exceptions.ConnectionError("refused"),
        requests.exceptions.Timeout("timed out"),
    ])
    def test_transient_failures(self, response):
        with pytest.raises(TransientCaptionerError):
            self.client(FakeSession([response])).caption(request())

    def test_client_error_is_not_transient(self):
        with pytest.raises(CaptionerError) as excinfo:
            self.client(FakeSession([FakeResponse(400, {"error": "bad image"})])).caption(request())
        assert not isinstance(excinfo.value, TransientCaptionerError)

    def test_missing_caption_field(self):
        with pytest.raises(ValidationError):
            self.client(FakeSession([FakeResponse(200, {"text": "x"})])).caption(request())

    def test_retry_then_success(self):
        session = FakeSession([FakeResponse(429, {}), FakeResponse(200, {"caption": "He leans back slightly."})])
        record = request_caption(request(), self.client(session), retries=3, sleep=lambda s: None)
        assert record.caption == "He leans back slightly."
        assert len(session.calls) == 2

    def test_log_has_no_credentials(self, tmp_path):
        log_dir = tmp_path / 'logs'
        session = FakeSession([FakeResponse(200, {"caption": "He turns."})])
        self.client(session, secret='s3cret', log_dir=str(log_dir)).caption(request())
        (log_name,) = os.listdir(log_dir)
        assert log_name.startswith('caption_request_')
        text = (log_dir / log_name).read_text(encoding='utf-8')
        assert 'key-123' not in text and 's3cret' not in text
        assert json.loads(text)['Response Log']['Response Status Code'] == 200

    def test_from_env_requires_credentials(self, monkeypatch, tmp_path):
        monkeypatch.chdir(tmp_path)
        monkeypatch.delenv('CAPTIONER_ENDPOINT', raising=False)
        monkeypatch.delenv('CAPTIONER_API_KEY', raising=False)
        with pytest.raises(CaptionerUnavailable):
            HttpCaptionClient.from_env()
        monkeypatch.setenv('CAPTIONER_ENDPOINT', 'https://captioner.example')
        monkeypatch.setenv('CAPTIONER_API_KEY', 'k')
        assert HttpCaptionClient.from_env().endpoint == 'https://captioner.example'


def test_signature_is_order_independent():
    a = generate_signature({'b': '2', 'a': '1'}, 'secret', '/op')
    b = generate_signature({'a': '1', 'b': '2'}, 'secret', '/op')
    assert a == b
    assert a != generate_signature({'a': '1', 'b': '2'}, 'other', '/op')
