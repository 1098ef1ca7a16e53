"""Authenticated chat service with conversation persistence.

State lives in a single-file sqlite database (accounts, sessions,
conversations, messages). Passwords are stored only as salted scrypt
hashes; sessions are opaque 256-bit tokens with a 24-hour expiry.
Outbound mail goes through a pluggable sink so tests never need a mail
server.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import re
import secrets
import sqlite3
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

from barkplug import ragchain
from barkplug.embedding import Embedder
from barkplug.ragchain import ChatTurn, GeneratorConfig
from barkplug.vectorstore import RetrievalQuery, VectorStore

TOKEN_TTL_SECONDS = 24 * 3600
TITLE_MAX_CHARS = 80
HISTORY_TURNS = 10
RATE_LIMIT_PER_MINUTE = 120

SCRYPT_N = 2**14
SCRYPT_R = 8
SCRYPT_P = 1

_EMAIL_RE = re.compile(r"^[^@\s]+@[^@\s]+\.[^@\s]+$")


class ServiceError(Exception):
    """Service failure with a stable machine-readable code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _auth_error() -> ServiceError:
    # unknown user and wrong password are deliberately indistinguishable
    return ServiceError("auth_invalid", "invalid credentials")


@dataclass
class Message:
    role: str
    content: str
    context_refs: list[dict] = field(default_factory=list)
    timestamp: float = 0.0
    error: bool = False

    def as_dict(self) -> dict:
        return {
            "role": self.role,
            "content": self.content,
            "context_refs": self.context_refs,
            "timestamp": self.timestamp,
            "error": self.error,
        }


@dataclass
class ConversationSummary:
    id: str
    title: str
    updated_at: float


@dataclass
class Conversation:
    id: str
    user_id: str
    title: str
    created_at: float
    updated_at: float
    messages: list[Message]

    def as_dict(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "messages": [m.as_dict() for m in self.messages],
        }


# --- password hashing --------------------------------------------------------


def hash_password(password: str) -> str:
    salt = secrets.token_bytes(16)
    digest = hashlib.scrypt(
        password.encode("utf-8"), salt=salt, n=SCRYPT_N, r=SCRYPT_R, p=SCRYPT_P
    )
    return f"scrypt${SCRYPT_N}${SCRYPT_R}${SCRYPT_P}${salt.hex()}${digest.hex()}"


def verify_password(password: str, stored: str) -> bool:
    try:
        scheme, n, r, p, salt_hex, digest_hex = stored.split("$")
        if scheme != "scrypt":
            return False
        digest = hashlib.scrypt(
            password.encode("utf-8"), salt=bytes.fromhex(salt_hex), n=int(n), r=int(r), p=int(p)
        )
        return hmac.compare_digest(digest.hex(), digest_hex)
    except (ValueError, TypeError):
        return False


# dummy hash so login timing does not reveal whether a username exists
_dummy_hash: str | None = None


def _get_dummy_hash() -> str:
    global _dummy_hash
    if _dummy_hash is None:
        _dummy_hash = hash_password(secrets.token_hex(8))
    return _dummy_hash


# --- storage -----------------------------------------------------------------

_SCHEMA = """
CREATE TABLE IF NOT EXISTS users (
    user_id TEXT PRIMARY KEY,
    username TEXT UNIQUE NOT NULL,
    password_hash TEXT NOT NULL,
    created_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS sessions (
    token TEXT PRIMARY KEY,
    user_id TEXT NOT NULL,
    expires_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS conversations (
    conversation_id TEXT PRIMARY KEY,
    user_id TEXT NOT NULL,
    title TEXT NOT NULL,
    created_at REAL NOT NULL,
    updated_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS messages (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    conversation_id TEXT NOT NULL,
    role TEXT NOT NULL,
    content TEXT NOT NULL,
    context_refs TEXT NOT NULL,
    timestamp REAL NOT NULL,
    error INTEGER NOT NULL DEFAULT 0
);
"""


class Storage:
    """Thin sqlite wrapper; one writer at a time, readers share the lock."""

    def __init__(self, path: str | Path):
        self.path = str(path)
        self._lock = threading.RLock()
        self._conn = sqlite3.connect(self.path, check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        with self._lock, self._conn:
            self._conn.executescript(_SCHEMA)

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    # users / sessions

    def create_user(self, user_id: str, username: str, password_hash: str, now: float) -> None:
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO users (user_id, username, password_hash, created_at) VALUES (?,?,?,?)",
                (user_id, username, password_hash, now),
            )

    def get_user_by_username(self, username: str) -> sqlite3.Row | None:
        with self._lock:
            return self._conn.execute(
                "SELECT * FROM users WHERE username = ?", (username,)
            ).fetchone()

    def create_session(self, token: str, user_id: str, expires_at: float) -> None:
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO sessions (token, user_id, expires_at) VALUES (?,?,?)",
                (token, user_id, expires_at),
            )

    def get_session(self, token: str) -> sqlite3.Row | None:
        with self._lock:
            return self._conn.execute(
                "SELECT * FROM sessions WHERE token = ?", (token,)
            ).fetchone()

    # conversations / messages

    def create_conversation(self, conversation_id: str, user_id: str, title: str, now: float) -> None:
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO conversations (conversation_id, user_id, title, created_at, updated_at)"
                " VALUES (?,?,?,?,?)",
                (conversation_id, user_id, title, now, now),
            )

    def get_conversation_row(self, conversation_id: str) -> sqlite3.Row | None:
        with self._lock:
            return self._conn.execute(
                "SELECT * FROM conversations WHERE conversation_id = ?", (conversation_id,)
            ).fetchone()

    def get_messages(self, conversation_id: str) -> list[Message]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT * FROM messages WHERE conversation_id = ? ORDER BY id", (conversation_id,)
            ).fetchall()
        return [
            Message(
                role=row["role"],
                content=row["content"],
                context_refs=json.loads(row["context_refs"]),
                timestamp=row["timestamp"],
                error=bool(row["error"]),
            )
            for row in rows
        ]

    def append_turn_pair(
        self, conversation_id: str, user_msg: Message, assistant_msg: Message, now: float
    ) -> None:
        """Persist the user/assistant pair atomically: both rows or neither."""
        with self._lock, self._conn:
            for msg in (user_msg, assistant_msg):
                self._conn.execute(
                    "INSERT INTO messages (conversation_id, role, content, context_refs, timestamp, error)"
                    " VALUES (?,?,?,?,?,?)",
                    (
                        conversation_id,
                        msg.role,
                        msg.content,
                        json.dumps(msg.context_refs),
                        msg.timestamp,
                        int(msg.error),
                    ),
                )
            self._conn.execute(
                "UPDATE conversations SET updated_at = ? WHERE conversation_id = ?",
                (now, conversation_id),
            )

    def list_conversations(self, user_id: str) -> list[ConversationSummary]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT conversation_id, title, updated_at FROM conversations"
                " WHERE user_id = ? ORDER BY updated_at DESC, conversation_id",
                (user_id,),
            ).fetchall()
        return [
            ConversationSummary(id=r["conversation_id"], title=r["title"], updated_at=r["updated_at"])
            for r in rows
        ]

    def delete_conversation(self, conversation_id: str) -> None:
        with self._lock, self._conn:
            self._conn.execute(
                "DELETE FROM messages WHERE conversation_id = ?", (conversation_id,)
            )
            self._conn.execute(
                "DELETE FROM conversations WHERE conversation_id = ?", (conversation_id,)
            )


# --- mail sinks --------------------------------------------------------------


class MailSinkError(RuntimeError):
    """Mail could not be handed to the sink; the operation is retryable."""


class MailSink(Protocol):
    def send(self, recipient: str, subject: str, body: str) -> None: ...


class FileOutboxSink:
    """Writes each message to one file in an outbox directory."""

    def __init__(self, outbox_dir: str | Path):
        self.outbox_dir = Path(outbox_dir)

    def send(self, recipient: str, subject: str, body: str) -> None:
        try:
            self.outbox_dir.mkdir(parents=True, exist_ok=True)
            name = f"{uuid.uuid4().hex}.txt"
            content = f"To: {recipient}\nSubject: {subject}\n\n{body}"
            (self.outbox_dir / name).write_text(content, encoding="utf-8")
        except OSError as exc:
            raise MailSinkError(f"outbox write failed: {exc}") from exc


class SmtpMailSink:
    """SMTP delivery for deployments; untouched by the test suite."""

    def __init__(self, host: str, port: int = 25, sender: str = "barkplug@localhost"):
        self.host = host
        self.port = port
        self.sender = sender

    def send(self, recipient: str, subject: str, body: str) -> None:
        import smtplib
        from email.message import EmailMessage

        msg = EmailMessage()
        msg["From"] = self.sender
        msg["To"] = recipient
        msg["Subject"] = subject
        msg.set_content(body)
        try:
            with smtplib.SMTP(self.host, self.port, timeout=30) as smtp:
                smtp.send_message(msg)
        except (OSError, smtplib.SMTPException) as exc:
            raise MailSinkError(f"smtp delivery failed: {exc}") from exc


# --- service -----------------------------------------------------------------


class ChatService:
    """Auth, chat, and conversation management over a mock or remote stack."""

    def __init__(
        self,
        storage: Storage,
        store: VectorStore,
        embedder: Embedder,
        generator: GeneratorConfig,
        retrieval: RetrievalQuery | None = None,
        mail_sink: MailSink | None = None,
        clock: Callable[[], float] = time.time,
        token_ttl: float = TOKEN_TTL_SECONDS,
        history_turns: int = HISTORY_TURNS,
        rate_limit_per_minute: int = RATE_LIMIT_PER_MINUTE,
    ):
        self.storage = storage
        self.store = store
        self.embedder = embedder
        self.generator = generator
        self.retrieval = retrieval or RetrievalQuery(text="")
        self.mail_sink = mail_sink or FileOutboxSink("outbox")
        self.clock = clock
        self.token_ttl = token_ttl
        self.history_turns = history_turns
        self.rate_limit_per_minute = rate_limit_per_minute
        self._rate: dict[str, tuple[int, int]] = {}  # token -> (minute window, count)
        self._rate_lock = threading.Lock()
        self._conversation_locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    # auth

    def signup(self, username: str, password: str) -> str:
        if not 3 <= len(username) <= 64:
            raise ServiceError("invalid_username", "username must be 3-64 characters")
        if len(password) < 8:
            raise ServiceError("weak_password", "password must be at least 8 characters")
        if self.storage.get_user_by_username(username) is not None:
            raise ServiceError("username_taken", f"username {username!r} is already registered")
        now = self.clock()
        user_id = uuid.uuid4().hex
        self.storage.create_user(user_id, username, hash_password(password), now)
        return self._issue_token(user_id)

    def login(self, username: str, password: str) -> str:
        row = self.storage.get_user_by_username(username)
        stored = row["password_hash"] if row is not None else _get_dummy_hash()
        if not verify_password(password, stored) or row is None:
            raise _auth_error()
        return self._issue_token(row["user_id"])

    def _issue_token(self, user_id: str) -> str:
        token = secrets.token_hex(32)
        self.storage.create_session(token, user_id, self.clock() + self.token_ttl)
        return token

    def _authenticate(self, token: str) -> str:
        session = self.storage.get_session(token or "")
        if session is None:
            raise _auth_error()
        if self.clock() >= session["expires_at"]:
            raise ServiceError("auth_expired", "session has expired")
        self._check_rate(token)
        return session["user_id"]

    def _check_rate(self, token: str) -> None:
        window = int(self.clock() // 60)
        with self._rate_lock:
            previous_window, count = self._rate.get(token, (window, 0))
            if previous_window != window:
                count = 0
            count += 1
            self._rate[token] = (window, count)
            if count > self.rate_limit_per_minute:
                raise ServiceError("rate_limited", "too many requests for this session")

    def _owned_conversation(self, user_id: str, conversation_id: str) -> sqlite3.Row:
        row = self.storage.get_conversation_row(conversation_id)
        if row is None or row["user_id"] != user_id:
            # foreign conversations are indistinguishable from missing ones
            raise ServiceError("not_found", "conversation not found")
        return row

    # chat

    def _conversation_lock(self, conversation_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._conversation_locks.setdefault(conversation_id, threading.Lock())

    def chat(self, token: str, prompt: str, conversation_id: str | None = None) -> tuple[str, Message]:
        user_id = self._authenticate(token)
        if not prompt.strip():
            raise ServiceError("empty_prompt", "prompt must be non-empty")
        if conversation_id is None:
            conversation_id = uuid.uuid4().hex
            self.storage.create_conversation(
                conversation_id, user_id, prompt.strip()[:TITLE_MAX_CHARS], self.clock()
            )
        else:
            self._owned_conversation(user_id, conversation_id)
        with self._conversation_lock(conversation_id):
            now = self.clock()

            history = [
                ChatTurn(role=m.role, content=m.content)
                for m in self.storage.get_messages(conversation_id)[-2 * self.history_turns :]
            ]
            user_msg = Message(role="user", content=prompt, timestamp=now)
            try:
                completion, context = ragchain.answer(
                    prompt,
                    self.store,
                    self.embedder,
                    self.generator,
                    retrieval=self.retrieval,
                    history=history,
                )
                refs = [
                    {"chunk_id": rec.chunk_id, "url": rec.url, "score": score}
                    for rec, score in context.items
                ]
                assistant_msg = Message(
                    role="assistant", content=completion.text, context_refs=refs, timestamp=now
                )
            except (ragchain.RetrievalPhaseError, ragchain.GenerationPhaseError) as exc:
                # keep history honest: the user turn is persisted alongside an
                # error-marked assistant turn instead of being dropped
                assistant_msg = Message(
                    role="assistant", content=str(exc), timestamp=now, error=True
                )
            self.storage.append_turn_pair(conversation_id, user_msg, assistant_msg, now)
        return conversation_id, assistant_msg

    # conversation management

    def list_conversations(self, token: str) -> list[ConversationSummary]:
        user_id = self._authenticate(token)
        return self.storage.list_conversations(user_id)

    def get_conversation(self, token: str, conversation_id: str) -> Conversation:
        user_id = self._authenticate(token)
        row = self._owned_conversation(user_id, conversation_id)
        return Conversation(
            id=row["conversation_id"],
            user_id=row["user_id"],
            title=row["title"],
            created_at=row["created_at"],
            updated_at=row["updated_at"],
            messages=self.storage.get_messages(conversation_id),
        )

    def delete_conversation(self, token: str, conversation_id: str) -> None:
        user_id = self._authenticate(token)
        self._owned_conversation(user_id, conversation_id)
        self.storage.delete_conversation(conversation_id)

    def email_conversation(self, token: str, conversation_id: str, recipient: str) -> str:
        user_id = self._authenticate(token)
        if not _EMAIL_RE.match(recipient or ""):
            raise ServiceError("invalid_recipient", f"not a valid email address: {recipient!r}")
        conversation = self.get_conversation(token, conversation_id)
        body = render_conversation_text(conversation)
        try:
            self.mail_sink.send(recipient, f'Conversation: {conversation.title}', body)
        except MailSinkError as exc:
            raise ServiceError("mail_sink_error", str(exc)) from exc
        return uuid.uuid4().hex

    def health(self) -> dict:
        return {
            "status": "ok",
            "store_loaded": self.store.dim is not None,
            "record_count": len(self.store),
        }


def render_conversation_text(conversation: Conversation) -> str:
    """Plain-text rendering: role-prefixed turns plus cited source urls."""
    lines = [f"Conversation: {conversation.title}", ""]
    for msg in conversation.messages:
        lines.append(f"[{msg.role}] {msg.content}")
        urls = [ref["url"] for ref in msg.context_refs if ref.get("url")]
        if urls:
            lines.append("  sources: " + ", ".join(urls))
        lines.append("")
    return "\n".join(lines)
