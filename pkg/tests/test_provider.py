import pytest
import requests

from conceptdlm.errors import ContractError, TransportError
from conceptdlm.provider import Completion, HTTPChatProvider, MockProvider, ProviderConfig


class FakeResponse:
    def __init__(self, status_code, body=None):
        self.status_code = status_code
        self.body = body or {}

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"status {self.status_code}")

    def json(self):
        if isinstance(self.body, Exception):
            raise self.body
        return self.body


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        response = self.responses.pop(0)
        if isinstance(response, Exception):
            raise response
        return response


def ok(text):
    return FakeResponse(
        200,
        {"choices": [{"message": {"content": text}}], "usage": {"prompt_tokens": 11, "completion_tokens": 7}},
    )


@pytest.fixture(autouse=True)
def no_sleep(monkeypatch):
    monkeypatch.setattr("conceptdlm.provider.time.sleep", lambda seconds: None)


class TestProviderConfig:
    def test_negative_price(self):
        with pytest.raises(ContractError):
            ProviderConfig(price_in=-1.0)


class TestHTTPChatProvider:
    def test_completion(self, monkeypatch):
        monkeypatch.setenv("CONCEPTDLM_API_KEY", "secret")
        session = FakeSession([ok("{}")])
        provider = HTTPChatProvider(ProviderConfig(endpoint="http://teacher", model="m"), session)
        completion = provider.complete([{"role": "user", "content": "hi"}])
        assert completion == Completion("{}", 11, 7)
        call = session.calls[0]
        assert call["url"] == "http://teacher"
        assert call["json"]["model"] == "m"
        assert call["json"]["messages"] == [{"role": "user", "content": "hi"}]
        assert call["headers"]["Authorization"] == "Bearer secret"

    def test_retries_transient_failures(self):
        session = FakeSession([requests.ConnectionError("down"), FakeResponse(503), ok("done")])
        provider = HTTPChatProvider(ProviderConfig(max_retries=3), session)
        assert provider.complete([]).text == "done"
        assert len(session.calls) == 3

    def test_gives_up(self):
        session = FakeSession([requests.Timeout("slow")] * 3)
        provider = HTTPChatProvider(ProviderConfig(max_retries=2), session)
        with pytest.raises(TransportError):
            provider.complete([])
        assert len(session.calls) == 3

    @pytest.mark.parametrize("status", [400, 401, 404])
    def test_client_error_is_not_retried(self, status):
        session = FakeSession([FakeResponse(status)] * 4)
        provider = HTTPChatProvider(ProviderConfig(max_retries=3), session)
        with pytest.raises(TransportError, match="rejected"):
            provider.complete([])
        assert len(session.calls) == 1

    @pytest.mark.parametrize(
        "body",
        [{"error": "overloaded"}, {"choices": []}, {"choices": [{"message": None}]}, ["not", "a", "dict"]],
    )
    def test_malformed_reply(self, body):
        session = FakeSession([FakeResponse(200, body)])
        provider = HTTPChatProvider(ProviderConfig(max_retries=3), session)
        with pytest.raises(TransportError, match="malformed"):
            provider.complete([])
        assert len(session.calls) == 1

    def test_undecodable_reply(self):
        session = FakeSession([FakeResponse(200, ValueError("Expecting value"))])
        provider = HTTPChatProvider(ProviderConfig(), session)
        with pytest.raises(TransportError, match="malformed"):
            provider.complete([])


class TestMockProvider:
    def test_replays_in_order(self):
        provider = MockProvider(["a", "b"])
        assert [provider.complete([]).text for _ in range(3)] == ["a", "b", "b"]
        assert len(provider.received) == 3

    def test_needs_replies(self):
        with pytest.raises(ContractError):
            MockProvider([]).complete([])
