"""HTTP surface for the chat service.

Every error body is {"code", "message"} with a stable code string so
clients can switch on it exhaustively.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from barkplug.service import ChatService, ServiceError

ERROR_STATUS = {
    "invalid_username": 422,
    "weak_password": 422,
    "username_taken": 409,
    "auth_invalid": 401,
    "auth_expired": 401,
    "rate_limited": 429,
    "not_found": 404,
    "empty_prompt": 422,
    "invalid_recipient": 422,
    "mail_sink_error": 502,
}


class Credentials(BaseModel):
    username: str
    password: str


class ChatRequest(BaseModel):
    prompt: str
    conversation_id: str | None = None


class EmailRequest(BaseModel):
    recipient: str


def _bearer_token(request: Request) -> str:
    header = request.headers.get("authorization", "")
    if header.lower().startswith("bearer "):
        return header[7:].strip()
    return ""


def create_app(service: ChatService, static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="barkplug", docs_url=None, redoc_url=None)

    @app.exception_handler(ServiceError)
    async def service_error_handler(_request: Request, exc: ServiceError) -> JSONResponse:
        status = ERROR_STATUS.get(exc.code, 500)
        return JSONResponse(status_code=status, content={"code": exc.code, "message": exc.message})

    @app.post("/api/auth/signup", status_code=201)
    def signup(body: Credentials) -> dict:
        return {"token": service.signup(body.username, body.password)}

    @app.post("/api/auth/login")
    def login(body: Credentials) -> dict:
        return {"token": service.login(body.username, body.password)}

    @app.post("/api/chat")
    def chat(body: ChatRequest, request: Request) -> dict:
        conversation_id, message = service.chat(
            _bearer_token(request), body.prompt, body.conversation_id
        )
        return {"conversation_id": conversation_id, "message": message.as_dict()}

    @app.get("/api/conversations")
    def list_conversations(request: Request) -> list[dict]:
        summaries = service.list_conversations(_bearer_token(request))
        return [{"id": s.id, "title": s.title, "updated_at": s.updated_at} for s in summaries]

    @app.get("/api/conversations/{conversation_id}")
    def get_conversation(conversation_id: str, request: Request) -> dict:
        return service.get_conversation(_bearer_token(request), conversation_id).as_dict()

    @app.delete("/api/conversations/{conversation_id}")
    def delete_conversation(conversation_id: str, request: Request) -> dict:
        service.delete_conversation(_bearer_token(request), conversation_id)
        return {"deleted": True}

    @app.post("/api/conversations/{conversation_id}/email")
    def email_conversation(conversation_id: str, body: EmailRequest, request: Request) -> dict:
        receipt = service.email_conversation(_bearer_token(request), conversation_id, body.recipient)
        return {"receipt_id": receipt}

    @app.get("/api/health")
    def health() -> dict:
        return service.health()

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
