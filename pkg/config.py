"""
Configuration management for the FMGP toolkit
Handles environment variables, validation, and logging setup
"""

import logging
from enum import Enum
from typing import Optional

import torch
from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Environment(str, Enum):
    DEVELOPMENT = "development"
    PRODUCTION = "production"


class LogLevel(str, Enum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


class Settings(BaseSettings):
    """Process settings with validation"""

    model_config = SettingsConfigDict(
        env_prefix="FMGP_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Application Settings
    environment: Environment = Environment.DEVELOPMENT
    log_level: LogLevel = LogLevel.INFO
    log_file: Optional[str] = None

    # Numerics
    torch_threads: int = 1  # single thread keeps reductions in a fixed order
    default_seed: int = 0

    @field_validator('log_level', mode='before')
    @classmethod
    def normalize_log_level(cls, v):
        """Accept lower-case level names"""
        if isinstance(v, str):
            return v.upper()
        return v

    @field_validator('torch_threads')
    @classmethod
    def validate_torch_threads(cls, v):
        if v < 1:
            raise ValueError('torch_threads must be at least 1')
        return v

    @property
    def is_production(self) -> bool:
        """Check if running in production"""
        return self.environment == Environment.PRODUCTION

    @property
    def is_development(self) -> bool:
        """Check if running in development"""
        return self.environment == Environment.DEVELOPMENT


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Get process settings"""
    return settings


def setup_logging(level: Optional[str] = None):
    """Setup logging based on configuration"""
    log_format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    if settings.is_development:
        log_format = "%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s"

    handlers = [logging.StreamHandler()]
    if settings.log_file:
        handlers.append(logging.FileHandler(settings.log_file))

    logging.basicConfig(
        level=getattr(logging, (level or settings.log_level.value).upper()),
        format=log_format,
        handlers=handlers,
        force=True,
    )

    # Reduce noise from some libraries in production
    if settings.is_production:
        logging.getLogger("sklearn").setLevel(logging.WARNING)
        logging.getLogger("torch").setLevel(logging.WARNING)


def configure_numerics():
    """Pin torch to the configured thread count"""
    torch.set_num_threads(settings.torch_threads)
    logging.getLogger(__name__).debug(f"torch threads: {settings.torch_threads}")
