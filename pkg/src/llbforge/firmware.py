"""Firmware bundle signing and verification pipeline.

A bundle is a zip archive carrying firmware images, one certificate per
image, and a plain-text manifest tying them together with load addresses
and version metadata.  Each certificate embeds a digest of its image and
is signed by the manufacturer; a device accepts an update only if, for
every entry, the certificate signature verifies against the configured
trust anchor and the embedded digest matches the image bytes.

Verification order is fixed and observable through the rejection codes:
the signature is checked first (failure is the classic transfer error
11001), the image digest second (failure is ``DigestMismatch``).  A
self-signed certificate therefore fails at the signature step no matter
how carefully its digest field was prepared.

The image digest algorithm defaults to SHA-256; ``digest_alg="sha1"`` is
a compatibility mode for older toolchains.  Certificate signatures are
always RSA PKCS#1 v1.5 over SHA-256 of the canonical certificate body.
Bundles are written with fixed zip timestamps so identical inputs produce
byte-identical archives.
"""

from __future__ import annotations

import hashlib
import io
import re
import zipfile
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa

from .model import LadderError

SIGNATURE_SCHEME = "rsa-pkcs1v15-sha256"
DIGEST_ALGS = ("sha256", "sha1")
ERR_BAD_SIGNATURE = 11001

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class FirmwareError(LadderError):
    pass


class MalformedBundleError(FirmwareError):
    pass


def _image_digest(data: bytes, digest_alg: str) -> bytes:
    if digest_alg not in DIGEST_ALGS:
        raise FirmwareError(f"unsupported digest algorithm {digest_alg!r}")
    return hashlib.new(digest_alg, data).digest()


# bytes.fromhex tolerates upper case and whitespace, which would let two
# textually different certificates decode to the same bytes; hex fields
# accept exactly the canonical form to_text emits
_STRICT_HEX_RE = re.compile(r"^(?:[0-9a-f]{2})*$")


def _strict_hex(value: str, field: str) -> bytes:
    if not _STRICT_HEX_RE.match(value):
        raise MalformedBundleError(
            f"{field} is not canonical lowercase hex")
    return bytes.fromhex(value)


_CERT_KEYS = ("product_code", "fw_version", "image_digest", "issuer_id",
              "digest_alg", "signature")
_CANON_INT_RE = re.compile(r"^(?:0|[1-9][0-9]*)$")


def generate_keypair(key_size: int = 2048):
    """(private_key, TrustAnchor) pair for the signing side."""
    key = rsa.generate_private_key(public_exponent=65537, key_size=key_size)
    return key, TrustAnchor.from_public_key(key.public_key())


def save_private_key(key, path) -> None:
    Path(path).write_bytes(key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    ))


def load_private_key(path):
    return serialization.load_pem_private_key(
        Path(path).read_bytes(), password=None)


@dataclass(frozen=True)
class TrustAnchor:
    issuer_id: str
    public_key: object

    @classmethod
    def from_public_key(cls, public_key) -> "TrustAnchor":
        der = public_key.public_bytes(
            serialization.Encoding.DER,
            serialization.PublicFormat.SubjectPublicKeyInfo,
        )
        return cls(hashlib.sha256(der).hexdigest()[:16], public_key)

    def save(self, path) -> None:
        Path(path).write_bytes(self.public_key.public_bytes(
            serialization.Encoding.PEM,
            serialization.PublicFormat.SubjectPublicKeyInfo,
        ))

    @classmethod
    def load(cls, path) -> "TrustAnchor":
        return cls.from_public_key(serialization.load_pem_public_key(
            Path(path).read_bytes()))


@dataclass(frozen=True)
class Certificate:
    product_code: int
    fw_version: str
    image_digest: bytes
    issuer_id: str
    digest_alg: str
    signature: bytes

    def body_text(self) -> str:
        """Canonical signed body: every field except the signature."""
        return (
            f"product_code={self.product_code}\n"
            f"fw_version={self.fw_version}\n"
            f"image_digest={self.image_digest.hex()}\n"
            f"issuer_id={self.issuer_id}\n"
            f"digest_alg={self.digest_alg}\n"
        )

    def to_text(self) -> str:
        return self.body_text() + f"signature={self.signature.hex()}\n"

    @classmethod
    def from_text(cls, text: str) -> "Certificate":
        # the accepted grammar is exactly what to_text emits: six
        # key=value lines in fixed order, "\n" terminated.  splitlines()
        # or int() tolerance would let a byte-level change (vertical tab
        # for newline, whitespace inside a number) parse back to the
        # same certificate and slip past signature verification.
        lines = text.split("\n")
        if len(lines) != len(_CERT_KEYS) + 1 or lines[-1] != "":
            raise MalformedBundleError(
                "certificate must be six key=value lines")
        fields = {}
        for key, line in zip(_CERT_KEYS, lines):
            prefix = key + "="
            if not line.startswith(prefix):
                raise MalformedBundleError(f"expected {key!r} line")
            fields[key] = line[len(prefix):]
        if not _CANON_INT_RE.match(fields["product_code"]):
            raise MalformedBundleError("product_code is not a canonical"
                                       " decimal integer")
        return cls(
            product_code=int(fields["product_code"]),
            fw_version=fields["fw_version"],
            image_digest=_strict_hex(fields["image_digest"],
                                     "image_digest"),
            issuer_id=fields["issuer_id"],
            digest_alg=fields["digest_alg"],
            signature=_strict_hex(fields["signature"], "signature"),
        )


@dataclass(frozen=True)
class ManifestEntry:
    image_name: str
    cert_name: str
    load_address: int     # 32-bit
    fw_version: str
    product_code: int

    def line(self) -> str:
        return (f"image={self.image_name} cert={self.cert_name} "
                f"addr=16#{self.load_address:08x} "
                f"version={self.fw_version} code={self.product_code}")


_ENTRY_RE = re.compile(
    r"^image=(\S+) cert=(\S+) addr=16#([0-9a-fA-F]{8}) "
    r"version=(\S+) code=(\d+)$")
_HEADER_RE = re.compile(r"^scheme=(\S+) digest=(\S+)$")


@dataclass(frozen=True)
class FirmwareBundle:
    manifest: tuple       # ManifestEntry in order
    images: dict          # name -> bytes
    certs: dict           # name -> Certificate
    digest_alg: str = "sha256"

    def __post_init__(self):
        for entry in self.manifest:
            if entry.image_name not in self.images:
                raise MalformedBundleError(
                    f"manifest names missing image {entry.image_name}")
            if entry.cert_name not in self.certs:
                raise MalformedBundleError(
                    f"manifest names missing certificate {entry.cert_name}")
            if not 0 <= entry.load_address <= 0xFFFFFFFF:
                raise MalformedBundleError(
                    f"load address out of range for {entry.image_name}")
        cert_owners: dict = {}
        for entry in self.manifest:
            owner = cert_owners.setdefault(entry.cert_name, entry.image_name)
            if owner != entry.image_name:
                raise MalformedBundleError(
                    f"certificate {entry.cert_name} is shared by "
                    f"{owner} and {entry.image_name}")

    def manifest_text(self) -> str:
        lines = [f"scheme={SIGNATURE_SCHEME} digest={self.digest_alg}"]
        lines.extend(entry.line() for entry in self.manifest)
        return "\n".join(lines) + "\n"


def _sign(private_key, data: bytes) -> bytes:
    return private_key.sign(data, padding.PKCS1v15(), hashes.SHA256())


def _verify_sig(public_key, signature: bytes, data: bytes) -> bool:
    try:
        public_key.verify(signature, data, padding.PKCS1v15(),
                          hashes.SHA256())
        return True
    except InvalidSignature:
        return False


def make_certificate(image: bytes, *, product_code: int, fw_version: str,
                     private_key, issuer_id: str,
                     digest_alg: str = "sha256") -> Certificate:
    unsigned = Certificate(
        product_code=product_code,
        fw_version=fw_version,
        image_digest=_image_digest(image, digest_alg),
        issuer_id=issuer_id,
        digest_alg=digest_alg,
        signature=b"",
    )
    sig = _sign(private_key, unsigned.body_text().encode("utf-8"))
    return Certificate(unsigned.product_code, unsigned.fw_version,
                       unsigned.image_digest, unsigned.issuer_id,
                       unsigned.digest_alg, sig)


def sign_bundle(entries, private_key, digest_alg: str = "sha256"
                ) -> FirmwareBundle:
    """Build a fully signed bundle.

    ``entries`` is an iterable of dicts with keys name, data, load_address,
    fw_version, product_code.
    """
    anchor = TrustAnchor.from_public_key(private_key.public_key())
    manifest = []
    images = {}
    certs = {}
    for e in entries:
        name = e["name"]
        cert_name = name + ".cert"
        images[name] = bytes(e["data"])
        certs[cert_name] = make_certificate(
            images[name],
            product_code=e["product_code"],
            fw_version=e["fw_version"],
            private_key=private_key,
            issuer_id=anchor.issuer_id,
            digest_alg=digest_alg,
        )
        manifest.append(ManifestEntry(
            image_name=name,
            cert_name=cert_name,
            load_address=e["load_address"],
            fw_version=e["fw_version"],
            product_code=e["product_code"],
        ))
    return FirmwareBundle(tuple(manifest), images, certs, digest_alg)


@dataclass(frozen=True)
class VerifyResult:
    accepted: bool
    code: object = None       # int 11001 or a symbolic name
    entry: str | None = None  # image name that failed

    def render(self) -> str:
        if self.accepted:
            return "ACCEPTED"
        return f"REJECTED code={self.code} entry={self.entry}"


def verify_bundle(bundle: FirmwareBundle, anchor: TrustAnchor
                  ) -> VerifyResult:
    """Per entry: certificate signature first, image digest second."""
    for entry in bundle.manifest:
        cert = bundle.certs[entry.cert_name]
        image = bundle.images[entry.image_name]
        body = cert.body_text().encode("utf-8")
        if cert.issuer_id != anchor.issuer_id \
                or not _verify_sig(anchor.public_key, cert.signature, body):
            return VerifyResult(False, ERR_BAD_SIGNATURE, entry.image_name)
        if cert.digest_alg != bundle.digest_alg:
            return VerifyResult(False, "DigestMismatch", entry.image_name)
        if cert.image_digest != _image_digest(image, cert.digest_alg):
            return VerifyResult(False, "DigestMismatch", entry.image_name)
        if (cert.product_code != entry.product_code
                or cert.fw_version != entry.fw_version):
            return VerifyResult(False, "MetadataMismatch", entry.image_name)
    return VerifyResult(True)


# ---------------------------------------------------------------------------
# Archive format


def save_bundle(bundle: FirmwareBundle, path) -> None:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        def put(name: str, data: bytes):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            zf.writestr(info, data)

        put("manifest.txt", bundle.manifest_text().encode("utf-8"))
        for name in sorted(bundle.images):
            put(name, bundle.images[name])
        for name in sorted(bundle.certs):
            put(name, bundle.certs[name].to_text().encode("utf-8"))
    Path(path).write_bytes(buf.getvalue())


def load_bundle(path) -> FirmwareBundle:
    try:
        zf = zipfile.ZipFile(io.BytesIO(Path(path).read_bytes()))
    except (OSError, zipfile.BadZipFile) as exc:
        raise MalformedBundleError(f"unreadable bundle: {exc}") from None
    with zf:
        names = set(zf.namelist())
        if "manifest.txt" not in names:
            raise MalformedBundleError("bundle has no manifest.txt")

        def read_text(name: str) -> str:
            try:
                return zf.read(name).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise MalformedBundleError(
                    f"{name} is not UTF-8 text: {exc}") from None

        lines = read_text("manifest.txt").splitlines()
        if not lines:
            raise MalformedBundleError("empty manifest")
        header = _HEADER_RE.match(lines[0])
        if not header:
            raise MalformedBundleError(f"bad manifest header: {lines[0]!r}")
        scheme, digest_alg = header.groups()
        if scheme != SIGNATURE_SCHEME:
            raise MalformedBundleError(f"unknown scheme {scheme!r}")
        if digest_alg not in DIGEST_ALGS:
            raise MalformedBundleError(f"unknown digest {digest_alg!r}")
        manifest = []
        for line in lines[1:]:
            if not line.strip():
                continue
            m = _ENTRY_RE.match(line)
            if not m:
                raise MalformedBundleError(f"bad manifest line: {line!r}")
            image, cert, addr, version, code = m.groups()
            manifest.append(ManifestEntry(image, cert, int(addr, 16),
                                          version, int(code)))
        images = {}
        certs = {}
        for entry in manifest:
            if entry.image_name not in names:
                raise MalformedBundleError(
                    f"bundle lacks image {entry.image_name}")
            if entry.cert_name not in names:
                raise MalformedBundleError(
                    f"bundle lacks certificate {entry.cert_name}")
            images[entry.image_name] = zf.read(entry.image_name)
            certs[entry.cert_name] = Certificate.from_text(
                read_text(entry.cert_name))
    return FirmwareBundle(tuple(manifest), images, certs, digest_alg)


__all__ = [
    "Certificate", "DIGEST_ALGS", "ERR_BAD_SIGNATURE", "FirmwareBundle",
    "FirmwareError", "MalformedBundleError", "ManifestEntry",
    "SIGNATURE_SCHEME", "TrustAnchor", "VerifyResult", "generate_keypair",
    "load_bundle", "load_private_key", "make_certificate", "save_bundle",
    "save_private_key", "sign_bundle", "verify_bundle",
]
