"""Content-addressed hosting for signed code bundles.

A bundle is a manifest (behavior id, version, state schema hint) plus an
opaque payload, encoded as 4-byte big-endian manifest length, manifest
bytes, payload bytes. Bundles are stored under their SHA-256 and served
read-only over plain HTTP at /bundles/<sha256>, so a published digest can
never change meaning. Publishing is local to the serving host; remote
parties only ever fetch.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import signal
import struct
import sys
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .errors import MeshError, NotFound
from .model import BundleRef
from .security import Certificate, KeyPair, sign_bundle
from .wire import canonical_json, parse_endpoint

_HEX64 = set("0123456789abcdef")


class HashMismatch(MeshError):
    code = "HASH_MISMATCH"


class BadBundle(MeshError):
    code = "BAD_BUNDLE"


def encode_bundle(manifest: dict, payload: bytes) -> bytes:
    if not manifest.get("behavior_id"):
        raise BadBundle("manifest.behavior_id is empty")
    manifest_bytes = canonical_json(manifest)
    return struct.pack(">I", len(manifest_bytes)) + manifest_bytes + payload


def decode_bundle(data: bytes) -> tuple[dict, bytes]:
    if len(data) < 4:
        raise BadBundle("bundle shorter than manifest header")
    (mlen,) = struct.unpack(">I", data[:4])
    if len(data) < 4 + mlen:
        raise BadBundle("bundle shorter than declared manifest")
    try:
        manifest = json.loads(data[4 : 4 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise BadBundle(f"manifest does not parse: {exc}") from exc
    if not isinstance(manifest, dict) or not manifest.get("behavior_id"):
        raise BadBundle("manifest missing behavior_id")
    return manifest, data[4 + mlen :]


class BundleStore:
    """Directory of immutable bundle files named by their digest."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def put(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        final = self.root / digest
        if final.exists():
            return digest
        tmp = self.root / f".{digest}.tmp.{os.getpid()}"
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, final)
        return digest

    def get(self, digest: str) -> bytes | None:
        if len(digest) != 64 or not set(digest) <= _HEX64:
            return None
        path = self.root / digest
        if not path.is_file():
            return None
        return path.read_bytes()


def publish(
    store: BundleStore,
    base_url: str,
    manifest: dict,
    payload: bytes,
    key: KeyPair,
    cert: Certificate,
) -> BundleRef:
    """Store a bundle and return the signed, content-addressed reference.

    Same bytes always yield the same reference modulo signature freshness;
    re-publishing is not an error.
    """
    data = encode_bundle(manifest, payload)
    digest = store.put(data)
    signature = sign_bundle(data, key, cert)
    return BundleRef(
        url=f"{base_url.rstrip('/')}/bundles/{digest}", sha256=digest, signature=signature
    )


def fetch(url: str, expected_sha256: str) -> bytes:
    """Bundle bytes from a code server, verified against the expected digest."""
    try:
        with urllib.request.urlopen(url, timeout=10.0) as resp:
            data = resp.read()
    except urllib.error.HTTPError as exc:
        if exc.code == 404:
            raise NotFound(f"no bundle at {url}") from exc
        raise MeshError(f"fetch failed: {exc}", code="FETCH_FAILED") from exc
    except (urllib.error.URLError, OSError) as exc:
        raise MeshError(f"fetch failed: {exc}", code="FETCH_FAILED") from exc
    if hashlib.sha256(data).hexdigest() != expected_sha256:
        raise HashMismatch(f"bytes at {url} do not match {expected_sha256}")
    return data


class _CodeHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, *args):
        pass

    def do_GET(self):
        store: BundleStore = self.server.store
        if self.path.startswith("/bundles/"):
            digest = self.path[len("/bundles/") :]
            data = store.get(digest)
            if data is None:
                self.send_response(404)
                self.send_header("Content-Length", "0")
                self.end_headers()
                return
            self.send_response(200)
            self.send_header("Content-Type", "application/octet-stream")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
            return
        self.send_response(404)
        self.send_header("Content-Length", "0")
        self.end_headers()


class CodeServer:
    def __init__(self, store: BundleStore, listen: str = "127.0.0.1:0"):
        host, port = parse_endpoint(listen)
        self._server = ThreadingHTTPServer((host, port), _CodeHandler)
        self._server.store = store
        self.store = store
        self.endpoint = f"{host}:{self._server.server_address[1]}"
        self.base_url = f"http://{self.endpoint}"

    def start(self) -> None:
        threading.Thread(target=self._server.serve_forever, daemon=True).start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mesh-codeserver", description="Bundle host daemon")
    parser.add_argument("--listen", default="127.0.0.1:4180")
    parser.add_argument("--store", required=True, help="bundle directory")
    args = parser.parse_args(argv)

    server = CodeServer(BundleStore(args.store), listen=args.listen)
    server.start()
    print(json.dumps({"ready": True, "listen": server.endpoint}), flush=True)

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    stop.wait()
    server.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
