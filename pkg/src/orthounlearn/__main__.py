"""Entry point for orthounlearn."""

from orthounlearn.cli import app

if __name__ == "__main__":
    app()
