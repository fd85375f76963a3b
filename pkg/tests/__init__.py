"""Tests for orthounlearn."""
