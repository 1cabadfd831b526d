"""
Farm Console Server

FastAPI service that:
1. Owns the console ports and relay chains of one console server
2. Pumps console bytes into the console log and attached sessions
3. Runs the liveness watchdog
4. Serves the authenticated control protocol on /ws/control
5. Reports health on /health
"""

import argparse
import asyncio
import logging
from contextlib import asynccontextmanager
from dataclasses import dataclass
from typing import Dict, Optional

from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from error_handler import ErrorHandler
from errors import BadRequest, FarmError
from services import registry as reg_mod
from services.authchan import ChallengeStore, parse_credential, scheme_by_name
from services.console_log import ConsoleLogSink
from services.consoled import ConsoleDaemon, ConsoleSession, SessionMode
from services.control_protocol import CommandHandler, decode_data, encode_data, format_record, parse_request
from services.farmsim import FarmHarness, spawn_farm
from services.port_transport import open_device
from services.relaynet import RelayDriver
from services.reset_service import AuditLog, ResetService
from services.simclock import WallClock
from services.watchdog import Watchdog
from settings import Settings, load_settings

logger = logging.getLogger(__name__)

PUMP_INTERVAL = 0.05
WATCHDOG_INTERVAL = 0.5
STREAM_INTERVAL = 0.02


@dataclass
class FarmconServer:
    """Everything one console server runs, wired together"""

    daemon: ConsoleDaemon
    resets: ResetService
    watchdog: Watchdog
    challenges: ChallengeStore
    handler: CommandHandler
    error_handler: ErrorHandler
    harness: Optional[FarmHarness] = None

    def pump_once(self) -> None:
        self.daemon.poll()

    def watch_once(self) -> None:
        """One watchdog tick, run off the pump thread"""
        self.watchdog.maybe_tick()


def build_server(settings: Settings, simulate: Optional[str] = None, seed: int = 0,
                 error_handler: Optional[ErrorHandler] = None) -> FarmconServer:
    """
    Open the ports and chains named in settings, or, with simulate, spawn a
    simulated farm in real time from a topology file.
    """
    clock = WallClock()
    error_handler = error_handler or ErrorHandler(clock=clock)
    server_id = settings.server.server_id
    registry = reg_mod.load(settings.server.registry_dir)
    harness = None

    if simulate:
        chain_name = next(iter(settings.relay.chains), "chain0")
        harness = spawn_farm(simulate, seed=seed, server_id=server_id, chain_name=chain_name, clock=clock, record=False)
        if not registry.records:
            registry = harness.registry(registry.grants, registry.keys.values())
        endpoints = dict(harness.console_endpoints)
        chain_ends = {chain_name: harness.chain_endpoint}
        logger.info(f"Simulating {len(harness.nodes)} nodes from {simulate}")
    else:
        endpoints = {index: open_device(path) for index, path in settings.ports.items()}
        chain_ends = {name: open_device(path) for name, path in settings.relay.chains.items()}

    chains: Dict[str, RelayDriver] = {
        name: RelayDriver(ep, settings.relay.ack_timeout, settings.relay.retries, name)
        for name, ep in chain_ends.items()
    }
    daemon = ConsoleDaemon(
        server_id,
        registry,
        endpoints,
        clock,
        log_sink=ConsoleLogSink(settings.server.console_log, settings.server.syslog),
        chains=chains,
        settings=settings.console,
        error_handler=error_handler,
        report_dir=settings.server.report_dir,
    )
    resets = ResetService(daemon, AuditLog(settings.server.audit_log), settings.reset.min_interval)
    watchdog = Watchdog(daemon, resets, settings.watchdog, settings.reset.watchdog_principal, error_handler)
    challenges = ChallengeStore(server_id, clock, scheme_by_name(settings.server.scheme))
    handler = CommandHandler(daemon, resets, watchdog, error_handler, settings.server.registry_dir)
    return FarmconServer(daemon, resets, watchdog, challenges, handler, error_handler, harness)


async def safe_send(websocket: WebSocket, message) -> bool:
    """Send text or bytes, tolerating a connection that is already gone"""
    try:
        if isinstance(message, bytes):
            await websocket.send_bytes(message)
        else:
            await websocket.send_text(message)
        return True
    except (RuntimeError, WebSocketDisconnect) as e:
        logger.debug(f"[WebSocket] send skipped: {e}")
        return False


async def send_error(websocket: WebSocket, error: FarmError) -> None:
    await safe_send(websocket, f"ERR {error.code} {error.message}")


def create_app(server: FarmconServer, run_background: bool = True) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        tasks = [asyncio.create_task(pump_loop()), asyncio.create_task(watchdog_loop())] if run_background else []
        yield
        for task in tasks:
            task.cancel()
        server.daemon.flush_logs()
        server.daemon.log_sink.close()

    async def pump_loop():
        while True:
            try:
                await asyncio.to_thread(server.pump_once)
            except Exception as e:
                server.error_handler.log_error(e, context="console pump")
            await asyncio.sleep(PUMP_INTERVAL)

    async def watchdog_loop():
        while True:
            try:
                await asyncio.to_thread(server.watch_once)
            except Exception as e:
                server.error_handler.log_error(e, context="watchdog")
            await asyncio.sleep(WATCHDOG_INTERVAL)

    app = FastAPI(title="Farmcon Console Server", lifespan=lifespan)
    app.state.farm = server

    @app.get("/health")
    async def health_check():
        """Health check endpoint"""
        daemon = server.daemon
        return {
            "status": "ok",
            "service": "Farmcon Console Server",
            "server_id": daemon.server_id,
            "ports": len(daemon.ports),
            "sessions": len(daemon.sessions()),
            "alarms": len(server.error_handler.alarms()),
            "timestamp": daemon.clock.timestamp(),
        }

    @app.websocket("/ws/control")
    async def control_endpoint(websocket: WebSocket):
        """Challenge handshake, then one control request per text message"""
        await websocket.accept()
        challenge = server.challenges.issue_challenge()
        await websocket.send_text(challenge.wire())
        try:
            credential = parse_credential(await websocket.receive_text())
            if credential is None:
                await send_error(websocket, BadRequest("expected AUTH <principal> <signature>"))
                await websocket.close(code=1008)
                return
            try:
                principal = server.challenges.authenticate(challenge, credential, server.daemon.registry)
            except FarmError as e:
                logger.warning(f"[WebSocket] authentication failed for {credential.principal}: {e.message}")
                await send_error(websocket, e)
                await websocket.close(code=1008)
                return
            await websocket.send_text(f"OK {principal}")
            logger.info(f"[WebSocket] {principal} connected")

            while True:
                line = await websocket.receive_text()
                try:
                    verb, args = parse_request(line)
                except FarmError as e:
                    await send_error(websocket, e)
                    continue
                if verb == "QUIT":
                    await safe_send(websocket, "OK")
                    break
                if verb == "ATTACH":
                    await attach_session(websocket, principal, args)
                elif verb == "SUBSCRIBE":
                    await pattern_stream(websocket, principal, args)
                else:
                    reply = await asyncio.to_thread(server.handler.handle, principal, line)
                    for out in reply.lines():
                        await websocket.send_text(out)
        except WebSocketDisconnect:
            logger.info("[WebSocket] control connection closed")

    async def attach_session(websocket: WebSocket, principal: str, args):
        if len(args) < 1:
            await send_error(websocket, BadRequest("usage: ATTACH <host> [rw|ro]"))
            return
        mode_arg = args[1] if len(args) > 1 else "rw"
        try:
            mode = SessionMode(mode_arg)
            session = await asyncio.to_thread(server.daemon.attach, principal, args[0], mode)
        except ValueError:
            await send_error(websocket, BadRequest(f"unknown mode {mode_arg!r}"))
            return
        except FarmError as e:
            await send_error(websocket, e)
            return
        await websocket.send_text(f"OK {session.session_id}")
        forward = asyncio.create_task(forward_session(websocket, session))
        try:
            while True:
                message = await websocket.receive()
                if message.get("type") == "websocket.disconnect":
                    raise WebSocketDisconnect(message.get("code", 1000))
                if message.get("bytes") is not None:
                    try:
                        keys = decode_data(message["bytes"])
                        alive = await asyncio.to_thread(server.daemon.send_keys, session, keys)
                    except FarmError as e:
                        await send_error(websocket, e)
                        continue
                    if not alive:
                        break
                elif (message.get("text") or "").strip() == "DETACH":
                    break
        finally:
            if not session.closed:
                server.daemon.detach(session)
            await forward

    async def forward_session(websocket: WebSocket, session: ConsoleSession):
        while True:
            data = session.read()
            if data:
                if not await safe_send(websocket, encode_data(data)):
                    return
            elif session.closed:
                break
            else:
                await asyncio.sleep(STREAM_INTERVAL)
        await safe_send(websocket, f"END {session.end_reason}")

    async def pattern_stream(websocket: WebSocket, principal: str, args):
        if len(args) < 1:
            await send_error(websocket, BadRequest("usage: SUBSCRIBE <host> [pattern]"))
            return
        pattern = args[1] if len(args) > 1 else ""
        try:
            sub = server.daemon.subscribe_pattern(principal, args[0], pattern)
        except FarmError as e:
            await send_error(websocket, e)
            return
        await websocket.send_text("OK")

        async def forward():
            while not sub.closed:
                for timestamp, text in sub.events():
                    if not await safe_send(websocket, format_record((timestamp, text))):
                        return
                await asyncio.sleep(STREAM_INTERVAL)

        task = asyncio.create_task(forward())
        try:
            while True:
                message = await websocket.receive()
                if message.get("type") == "websocket.disconnect":
                    raise WebSocketDisconnect(message.get("code", 1000))
                if (message.get("text") or "").strip() == "UNSUBSCRIBE":
                    break
        finally:
            server.daemon.unsubscribe(sub)
            await task
        await safe_send(websocket, "END unsubscribed")

    return app


def app_factory() -> FastAPI:
    """Entry point for `uvicorn --factory console_server:app_factory`"""
    settings = load_settings()
    return create_app(build_server(settings))


if __name__ == "__main__":
    import uvicorn

    parser = argparse.ArgumentParser(description="Farm console server")
    parser.add_argument("--config", default=None, help="Server config file (default: $FARMCON_CONFIG or server.conf)")
    parser.add_argument("--simulate", default=None, metavar="TOPOLOGY", help="Run a simulated farm instead of real ports")
    parser.add_argument("--seed", type=int, default=0, help="Seed for the simulated farm")
    args = parser.parse_args()

    settings = load_settings(args.config)
    server = build_server(settings, simulate=args.simulate, seed=args.seed)

    print("Starting Farmcon Console Server...")
    print(f"Control endpoint: ws://{settings.server.host}:{settings.server.port}/ws/control")

    uvicorn.run(
        create_app(server),
        host=settings.server.host,
        port=settings.server.port,
        log_level="info"
    )
