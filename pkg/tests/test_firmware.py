"""Firmware bundle signing and verification."""

import dataclasses
import hashlib
import zipfile

import pytest

from llbforge.firmware import (
    Certificate,
    ERR_BAD_SIGNATURE,
    FirmwareBundle,
    MalformedBundleError,
    ManifestEntry,
    SIGNATURE_SCHEME,
    TrustAnchor,
    generate_keypair,
    load_bundle,
    load_private_key,
    make_certificate,
    save_bundle,
    save_private_key,
    sign_bundle,
    verify_bundle,
)

IMAGE_A = bytes(range(64))
IMAGE_B = b"boot2" * 20


@pytest.fixture(scope="module")
def key():
    private_key, _ = generate_keypair()
    return private_key


@pytest.fixture(scope="module")
def attacker_key():
    private_key, _ = generate_keypair()
    return private_key


@pytest.fixture(scope="module")
def anchor(key):
    return TrustAnchor.from_public_key(key.public_key())


def test_generate_keypair_returns_matching_anchor():
    private_key, anchor = generate_keypair(key_size=1024)
    rebuilt = TrustAnchor.from_public_key(private_key.public_key())
    assert anchor.issuer_id == rebuilt.issuer_id


def two_image_entries():
    return [
        {"name": "main.bin", "data": IMAGE_A, "load_address": 0x08000000,
         "fw_version": "2.1.0", "product_code": 1756},
        {"name": "boot.bin", "data": IMAGE_B, "load_address": 0x08100000,
         "fw_version": "1.0.3", "product_code": 1756},
    ]


@pytest.fixture(scope="module")
def bundle(key):
    return sign_bundle(two_image_entries(), key)


class TestKeysAndAnchor:
    def test_private_key_round_trip(self, key, tmp_path):
        p = tmp_path / "signer.pem"
        save_private_key(key, p)
        assert p.read_bytes().startswith(b"-----BEGIN")
        loaded = load_private_key(p)
        assert loaded.private_numbers() == key.private_numbers()

    def test_issuer_id_is_pubkey_digest_prefix(self, key):
        from cryptography.hazmat.primitives import serialization
        der = key.public_key().public_bytes(
            serialization.Encoding.DER,
            serialization.PublicFormat.SubjectPublicKeyInfo)
        anchor = TrustAnchor.from_public_key(key.public_key())
        assert anchor.issuer_id == hashlib.sha256(der).hexdigest()[:16]
        assert len(anchor.issuer_id) == 16

    def test_anchor_round_trip(self, anchor, tmp_path):
        p = tmp_path / "anchor.pem"
        anchor.save(p)
        assert TrustAnchor.load(p).issuer_id == anchor.issuer_id

    def test_distinct_keys_distinct_issuers(self, key, attacker_key):
        a = TrustAnchor.from_public_key(key.public_key())
        b = TrustAnchor.from_public_key(attacker_key.public_key())
        assert a.issuer_id != b.issuer_id


class TestCertificate:
    def test_text_round_trip(self, key, anchor):
        cert = make_certificate(IMAGE_A, product_code=1756,
                                fw_version="2.1.0", private_key=key,
                                issuer_id=anchor.issuer_id)
        assert Certificate.from_text(cert.to_text()) == cert

    def test_digest_matches_image(self, key, anchor):
        cert = make_certificate(IMAGE_A, product_code=1, fw_version="1",
                                private_key=key, issuer_id=anchor.issuer_id)
        assert cert.image_digest == hashlib.sha256(IMAGE_A).digest()

    def test_sha1_mode(self, key, anchor):
        cert = make_certificate(IMAGE_A, product_code=1, fw_version="1",
                                private_key=key, issuer_id=anchor.issuer_id,
                                digest_alg="sha1")
        assert cert.image_digest == hashlib.sha1(IMAGE_A).digest()

    def test_malformed_text(self):
        with pytest.raises(MalformedBundleError):
            Certificate.from_text("product_code=1\nno equals sign here")
        with pytest.raises(MalformedBundleError):
            Certificate.from_text("product_code=1\nfw_version=1\n")
        with pytest.raises(MalformedBundleError):
            Certificate.from_text(
                "product_code=xyz\nfw_version=1\nimage_digest=00\n"
                "issuer_id=a\ndigest_alg=sha256\nsignature=00\n")

    def test_hex_fields_are_strict(self, key, anchor):
        # upper case and stray whitespace decode to the same bytes under
        # bytes.fromhex; the canonical form is the only accepted spelling
        cert = make_certificate(IMAGE_A, product_code=1, fw_version="1",
                                private_key=key, issuer_id=anchor.issuer_id)
        text = cert.to_text()
        upper = text.replace(
            f"image_digest={cert.image_digest.hex()}",
            f"image_digest={cert.image_digest.hex().upper()}")
        assert upper != text
        with pytest.raises(MalformedBundleError):
            Certificate.from_text(upper)
        padded = text.replace(f"signature={cert.signature.hex()}\n",
                              f"signature={cert.signature.hex()} \n")
        with pytest.raises(MalformedBundleError):
            Certificate.from_text(padded)


class TestVerify:
    def test_good_bundle_accepted(self, bundle, anchor):
        result = verify_bundle(bundle, anchor)
        assert result.accepted
        assert result.render() == "ACCEPTED"

    def test_self_signed_substitution(self, bundle, attacker_key, anchor):
        """Re-signing with a key outside the trust anchor is the classic
        counterfeit path; it must fail on the signature check, not later."""
        forged = sign_bundle(two_image_entries(), attacker_key)
        result = verify_bundle(forged, anchor)
        assert not result.accepted
        assert result.code == ERR_BAD_SIGNATURE
        assert "11001" in result.render()

    def test_forged_issuer_id_still_rejected(self, bundle, attacker_key,
                                             anchor):
        # attacker copies the victim issuer_id but cannot produce a valid
        # signature under the anchored key
        cert = make_certificate(IMAGE_A, product_code=1756,
                                fw_version="2.1.0",
                                private_key=attacker_key,
                                issuer_id=anchor.issuer_id)
        forged = FirmwareBundle(
            bundle.manifest, dict(bundle.images),
            {**bundle.certs, "main.bin.cert": cert})
        result = verify_bundle(forged, anchor)
        assert result.code == ERR_BAD_SIGNATURE
        assert result.entry == "main.bin"

    def test_tampered_image(self, bundle, anchor):
        tampered = dict(bundle.images)
        tampered["boot.bin"] = b"\x00" + tampered["boot.bin"][1:]
        result = verify_bundle(
            FirmwareBundle(bundle.manifest, tampered, bundle.certs), anchor)
        assert (result.accepted, result.code) == (False, "DigestMismatch")
        assert result.entry == "boot.bin"

    def test_metadata_mismatch(self, bundle, anchor):
        entry = bundle.manifest[0]
        lying = dataclasses.replace(entry, fw_version="9.9.9")
        result = verify_bundle(
            FirmwareBundle((lying,) + bundle.manifest[1:], bundle.images,
                           bundle.certs), anchor)
        assert result.code == "MetadataMismatch"

    def test_signature_outranks_digest(self, bundle, attacker_key, anchor):
        # both the signature and the image are bad: code 11001 wins
        forged = sign_bundle(two_image_entries(), attacker_key)
        tampered = dict(forged.images)
        tampered["main.bin"] = tampered["main.bin"][::-1]
        result = verify_bundle(
            FirmwareBundle(forged.manifest, tampered, forged.certs), anchor)
        assert result.code == ERR_BAD_SIGNATURE

    def test_digest_outranks_metadata(self, bundle, anchor):
        entry = bundle.manifest[0]
        lying = dataclasses.replace(entry, fw_version="9.9.9")
        tampered = dict(bundle.images)
        tampered["main.bin"] = tampered["main.bin"][::-1]
        result = verify_bundle(
            FirmwareBundle((lying,) + bundle.manifest[1:], tampered,
                           bundle.certs), anchor)
        assert result.code == "DigestMismatch"

    def test_digest_alg_downgrade_rejected(self, key, anchor):
        # certificate pinned to sha256 inside a bundle claiming sha1: the
        # signed digest_alg field blocks the downgrade
        good = sign_bundle(two_image_entries(), key)
        downgraded = FirmwareBundle(good.manifest, good.images, good.certs,
                                    digest_alg="sha1")
        assert verify_bundle(downgraded, anchor).code == "DigestMismatch"

    def test_sha1_bundle_round_trip(self, key):
        anchor = TrustAnchor.from_public_key(key.public_key())
        b = sign_bundle(two_image_entries(), key, digest_alg="sha1")
        assert verify_bundle(b, anchor).accepted


class TestArchive:
    def test_save_load_round_trip(self, bundle, anchor, tmp_path):
        p = tmp_path / "fw.zip"
        save_bundle(bundle, p)
        loaded = load_bundle(p)
        assert loaded == bundle
        assert verify_bundle(loaded, anchor).accepted

    def test_archive_bytes_deterministic(self, key, tmp_path):
        p1, p2 = tmp_path / "a.zip", tmp_path / "b.zip"
        save_bundle(sign_bundle(two_image_entries(), key), p1)
        save_bundle(sign_bundle(two_image_entries(), key), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_manifest_text_shape(self, bundle):
        lines = bundle.manifest_text().splitlines()
        assert lines[0] == f"scheme={SIGNATURE_SCHEME} digest=sha256"
        assert lines[1].startswith("image=main.bin cert=main.bin.cert "
                                   "addr=16#08000000 ")

    def test_not_a_zip(self, tmp_path):
        p = tmp_path / "junk.zip"
        p.write_bytes(b"PK\x03\x04 but not really")
        with pytest.raises(MalformedBundleError):
            load_bundle(p)

    def test_missing_manifest(self, tmp_path):
        p = tmp_path / "fw.zip"
        with zipfile.ZipFile(p, "w") as zf:
            zf.writestr("main.bin", b"data")
        with pytest.raises(MalformedBundleError):
            load_bundle(p)

    def test_bad_header_scheme(self, bundle, tmp_path):
        p = tmp_path / "fw.zip"
        save_bundle(bundle, p)
        raw = zipfile.ZipFile(p)
        members = {n: raw.read(n) for n in raw.namelist()}
        members["manifest.txt"] = members["manifest.txt"].replace(
            SIGNATURE_SCHEME.encode(), b"rsa-oaep-md5")
        with zipfile.ZipFile(p, "w") as zf:
            for n, d in members.items():
                zf.writestr(n, d)
        with pytest.raises(MalformedBundleError):
            load_bundle(p)

    def test_manifest_names_missing_image(self, bundle, tmp_path):
        p = tmp_path / "fw.zip"
        save_bundle(bundle, p)
        raw = zipfile.ZipFile(p)
        members = {n: raw.read(n) for n in raw.namelist()
                   if n != "boot.bin"}
        with zipfile.ZipFile(p, "w") as zf:
            for n, d in members.items():
                zf.writestr(n, d)
        with pytest.raises(MalformedBundleError):
            load_bundle(p)

    def test_shared_certificate_rejected(self, bundle):
        entry = dataclasses.replace(bundle.manifest[1],
                                    cert_name="main.bin.cert")
        with pytest.raises(MalformedBundleError):
            FirmwareBundle((bundle.manifest[0], entry), bundle.images,
                           bundle.certs)

    def test_load_address_range(self, bundle):
        entry = dataclasses.replace(bundle.manifest[0],
                                    load_address=2**32)
        with pytest.raises(MalformedBundleError):
            FirmwareBundle((entry,) + bundle.manifest[1:], bundle.images,
                           bundle.certs)
