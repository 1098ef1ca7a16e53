from __future__ import annotations

import pytest

from barkplug.ragchain import GeneratorConfig
from barkplug.service import (
    ChatService,
    FileOutboxSink,
    MailSinkError,
    ServiceError,
    Storage,
    hash_password,
    verify_password,
)
from barkplug.vectorstore import RetrievalQuery


class FakeClock:
    def __init__(self, start=1_700_000_000.0):
        self.now = start

    def __call__(self):
        return self.now

    def advance(self, seconds):
        self.now += seconds


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def service(tmp_path, fixture_store, local_embedder, clock):
    return ChatService(
        storage=Storage(tmp_path / "svc.db"),
        store=fixture_store,
        embedder=local_embedder,
        generator=GeneratorConfig(),
        retrieval=RetrievalQuery(text="", method="threshold", threshold=0.3, k=4),
        mail_sink=FileOutboxSink(tmp_path / "outbox"),
        clock=clock,
    )


class TestPasswordHashing:
    def test_round_trip(self):
        stored = hash_password("correct horse battery")
        assert verify_password("correct horse battery", stored)
        assert not verify_password("wrong", stored)

    def test_scheme_recorded_and_salted(self):
        a = hash_password("same password")
        b = hash_password("same password")
        assert a.startswith("scrypt$")
        assert a != b  # unique salts

    def test_garbage_stored_value(self):
        assert not verify_password("x", "not-a-hash")


class TestAuth:
    def test_signup_returns_token(self, service):
        token = service.signup("alice", "sufficiently-long")
        assert len(token) == 64

    def test_duplicate_username_conflict(self, service):
        service.signup("alice", "sufficiently-long")
        with pytest.raises(ServiceError) as excinfo:
            service.signup("alice", "another-password")
        assert excinfo.value.code == "username_taken"

    def test_short_password_names_rule(self, service):
        with pytest.raises(ServiceError) as excinfo:
            service.signup("bob", "short:7")
        assert excinfo.value.code == "weak_password"
        assert "8" in excinfo.value.message

    def test_username_length_bounds(self, service):
        with pytest.raises(ServiceError):
            service.signup("ab", "long-enough-pw")
        with pytest.raises(ServiceError):
            service.signup("x" * 65, "long-enough-pw")

    def test_login_ok(self, service):
        service.signup("alice", "sufficiently-long")
        token = service.login("alice", "sufficiently-long")
        assert service.list_conversations(token) == []

    def test_wrong_password_and_unknown_user_indistinguishable(self, service):
        service.signup("alice", "sufficiently-long")
        with pytest.raises(ServiceError) as wrong:
            service.login("alice", "not-the-password")
        with pytest.raises(ServiceError) as unknown:
            service.login("nobody", "not-the-password")
        assert wrong.value.code == unknown.value.code == "auth_invalid"
        assert wrong.value.message == unknown.value.message

    def test_expired_token(self, service, clock):
        token = service.signup("alice", "sufficiently-long")
        clock.advance(24 * 3600 + 1)
        with pytest.raises(ServiceError) as excinfo:
            service.list_conversations(token)
        assert excinfo.value.code == "auth_expired"

    def test_bad_token(self, service):
        with pytest.raises(ServiceError) as excinfo:
            service.list_conversations("bogus")
        assert excinfo.value.code == "auth_invalid"


class TestChat:
    def test_first_message_creates_conversation(self, service):
        token = service.signup("alice", "sufficiently-long")
        cid, message = service.chat(token, "admissions phone")
        assert message.role == "assistant"
        assert "662-325-2224" in message.content
        assert len(message.context_refs) >= 1
        conversation = service.get_conversation(token, cid)
        assert len(conversation.messages) == 2
        assert [m.role for m in conversation.messages] == ["user", "assistant"]

    def test_second_message_appends(self, service):
        token = service.signup("alice", "sufficiently-long")
        cid, _ = service.chat(token, "admissions phone")
        cid2, _ = service.chat(token, "housing assignments", conversation_id=cid)
        assert cid2 == cid
        assert len(service.get_conversation(token, cid).messages) == 4

    def test_history_passed_to_pipeline(self, service, monkeypatch):
        import barkplug.service as service_module

        seen = {}
        real_answer = service_module.ragchain.answer

        def spy(prompt, store, embedder, generator, retrieval=None, history=None):
            seen["history"] = list(history or [])
            return real_answer(
                prompt, store, embedder, generator, retrieval=retrieval, history=history
            )

        monkeypatch.setattr(service_module.ragchain, "answer", spy)
        token = service.signup("alice", "sufficiently-long")
        cid, _ = service.chat(token, "admissions phone")
        service.chat(token, "and housing?", conversation_id=cid)
        assert len(seen["history"]) == 2
        assert seen["history"][0].content == "admissions phone"
        assert seen["history"][0].role == "user"

    def test_empty_prompt_rejected(self, service):
        token = service.signup("alice", "sufficiently-long")
        with pytest.raises(ServiceError) as excinfo:
            service.chat(token, "   ")
        assert excinfo.value.code == "empty_prompt"

    def test_foreign_conversation_not_found(self, service):
        token_a = service.signup("alice", "sufficiently-long")
        token_b = service.signup("bobby", "sufficiently-long")
        cid, _ = service.chat(token_a, "admissions phone")
        with pytest.raises(ServiceError) as excinfo:
            service.chat(token_b, "sneaky", conversation_id=cid)
        assert excinfo.value.code == "not_found"

    def test_generation_failure_persists_error_turn(self, service, monkeypatch):
        import barkplug.service as service_module
        from barkplug.ragchain import GenerationPhaseError

        def exploding(*args, **kwargs):
            raise GenerationPhaseError("generation failed: provider down")

        monkeypatch.setattr(service_module.ragchain, "answer", exploding)
        token = service.signup("alice", "sufficiently-long")
        cid, message = service.chat(token, "hello there")
        assert message.error is True
        conversation = service.get_conversation(token, cid)
        assert len(conversation.messages) == 2  # even count: history stays honest
        assert conversation.messages[0].role == "user"
        assert conversation.messages[1].error is True

    def test_title_is_truncated_first_prompt(self, service):
        token = service.signup("alice", "sufficiently-long")
        long_prompt = "p" * 300
        cid, _ = service.chat(token, long_prompt)
        conversation = service.get_conversation(token, cid)
        assert conversation.title == "p" * 80

    def test_rate_limit(self, tmp_path, fixture_store, local_embedder, clock):
        svc = ChatService(
            storage=Storage(tmp_path / "rl.db"),
            store=fixture_store,
            embedder=local_embedder,
            generator=GeneratorConfig(),
            clock=clock,
            rate_limit_per_minute=3,
        )
        token = svc.signup("alice", "sufficiently-long")
        for _ in range(3):
            svc.list_conversations(token)
        with pytest.raises(ServiceError) as excinfo:
            svc.list_conversations(token)
        assert excinfo.value.code == "rate_limited"
        clock.advance(61)
        svc.list_conversations(token)  # window reset


class TestConversationManagement:
    def test_list_sorted_newest_first(self, service, clock):
        token = service.signup("alice", "sufficiently-long")
        ids = []
        for prompt in ("first", "second", "third"):
            cid, _ = service.chat(token, prompt)
            ids.append(cid)
            clock.advance(60)
        summaries = service.list_conversations(token)
        assert [s.id for s in summaries] == list(reversed(ids))
        assert summaries[-1].title == "first"

    def test_delete_then_get_not_found(self, service):
        token = service.signup("alice", "sufficiently-long")
        cid, _ = service.chat(token, "hello")
        service.delete_conversation(token, cid)
        with pytest.raises(ServiceError) as excinfo:
            service.get_conversation(token, cid)
        assert excinfo.value.code == "not_found"
        with pytest.raises(ServiceError):
            service.delete_conversation(token, cid)  # second delete -> not_found

    def test_foreign_delete_leaves_target(self, service):
        token_a = service.signup("alice", "sufficiently-long")
        token_b = service.signup("bobby", "sufficiently-long")
        cid, _ = service.chat(token_a, "mine")
        with pytest.raises(ServiceError) as excinfo:
            service.delete_conversation(token_b, cid)
        assert excinfo.value.code == "not_found"
        assert service.get_conversation(token_a, cid).id == cid

    def test_isolation_on_list(self, service):
        token_a = service.signup("alice", "sufficiently-long")
        token_b = service.signup("bobby", "sufficiently-long")
        service.chat(token_a, "alice topic")
        assert service.list_conversations(token_b) == []


class TestEmail:
    def test_outbox_file_contains_turns_and_recipient(self, service, tmp_path):
        token = service.signup("alice", "sufficiently-long")
        cid, _ = service.chat(token, "admissions phone")
        receipt = service.email_conversation(token, cid, "friend@example.org")
        assert receipt
        files = list((tmp_path / "outbox").iterdir())
        assert len(files) == 1
        content = files[0].read_text(encoding="utf-8")
        assert "To: friend@example.org" in content
        assert "[user] admissions phone" in content
        assert "[assistant]" in content
        assert "https://www.example.edu/admissions" in content  # cited source url

    def test_malformed_address(self, service):
        token = service.signup("alice", "sufficiently-long")
        cid, _ = service.chat(token, "hello")
        with pytest.raises(ServiceError) as excinfo:
            service.email_conversation(token, cid, "x@")
        assert excinfo.value.code == "invalid_recipient"

    def test_sink_failure_is_typed_and_leaves_no_file(
        self, tmp_path, fixture_store, local_embedder, clock
    ):
        class DownSink:
            def send(self, recipient, subject, body):
                raise MailSinkError("unreachable")

        svc = ChatService(
            storage=Storage(tmp_path / "m.db"),
            store=fixture_store,
            embedder=local_embedder,
            generator=GeneratorConfig(),
            mail_sink=DownSink(),
            clock=clock,
        )
        token = svc.signup("alice", "sufficiently-long")
        cid, _ = svc.chat(token, "hello")
        with pytest.raises(ServiceError) as excinfo:
            svc.email_conversation(token, cid, "a@b.example")
        assert excinfo.value.code == "mail_sink_error"
        assert not (tmp_path / "outbox").exists()
        assert len(svc.get_conversation(token, cid).messages) == 2  # untouched


class TestPersistenceAcrossRestart:
    def test_state_survives_restart(self, tmp_path, fixture_store, local_embedder, clock):
        db = tmp_path / "persist.db"

        def build():
            return ChatService(
                storage=Storage(db),
                store=fixture_store,
                embedder=local_embedder,
                generator=GeneratorConfig(),
                retrieval=RetrievalQuery(text="", threshold=0.3, k=4),
                clock=clock,
            )

        first = build()
        token = first.signup("alice", "sufficiently-long")
        cid, _ = first.chat(token, "admissions phone")
        first.storage.close()

        second = build()
        # the session token survives the restart too
        summaries = second.list_conversations(token)
        assert [s.id for s in summaries] == [cid]
        conversation = second.get_conversation(token, cid)
        assert len(conversation.messages) == 2
        assert "662-325-2224" in conversation.messages[1].content

    def test_plaintext_password_never_stored(self, tmp_path, fixture_store, local_embedder):
        db = tmp_path / "scan.db"
        svc = ChatService(
            storage=Storage(db),
            store=fixture_store,
            embedder=local_embedder,
            generator=GeneratorConfig(),
        )
        secret = "hunter2-super-secret"
        svc.signup("alice", secret)
        svc.storage.close()
        assert secret.encode("utf-8") not in db.read_bytes()


class TestHealth:
    def test_health_reports_store(self, service, fixture_store):
        info = service.health()
        assert info["status"] == "ok"
        assert info["store_loaded"] is True
        assert info["record_count"] == len(fixture_store)
