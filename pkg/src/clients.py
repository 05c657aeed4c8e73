import logging
from typing import Optional

from config import Config
from services.embedding_service import EmbeddingProvider, HttpEmbeddingProvider, MockEmbeddingProvider
from services.llm_service import ChatProvider

logger = logging.getLogger("Toolsift.Clients")


class Clients:
    def __init__(self):
        self.chat: Optional[ChatProvider] = None
        self.embedding: Optional[EmbeddingProvider] = None

    def initialize_chat(self):
        Config.validate(need_chat=True)
        logger.info(f"Using chat provider at {Config.CHAT_API_BASE} (model {Config.CHAT_MODEL})")
        self.chat = ChatProvider(Config.CHAT_API_BASE, Config.CHAT_API_KEY, Config.CHAT_MODEL)

    def initialize_embedding(self, mock: bool = False):
        if mock:
            logger.info("Using mock embedding provider")
            self.embedding = MockEmbeddingProvider()
            return
        Config.validate(need_embedding=True)
        logger.info(f"Using embedding provider at {Config.EMBEDDING_API_BASE} (model {Config.EMBEDDING_MODEL})")
        self.embedding = HttpEmbeddingProvider(
            Config.EMBEDDING_API_BASE, Config.EMBEDDING_API_KEY, Config.EMBEDDING_MODEL
        )


clients = Clients()
