import logging

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.config import settings
from app.middleware.error_handler import setup_error_handlers
from app.routes import segmentation
from app.services.model_service import model_service
from app.utils.logger import setup_logger

logger = setup_logger(level=getattr(logging, settings.LOG_LEVEL), log_file=settings.LOG_FILE)

app = FastAPI(
    title="Domain Adaptation Segmentation Service",
    description="Lesion segmentation with patch networks transferred across acquisition protocols",
    version="0.1.0",
)

setup_error_handlers(app)

# Uploads are raw MVL1 bytes, so only GET and POST are exposed
app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["GET", "POST"], allow_headers=["*"])

app.include_router(segmentation.router, prefix="/segmentation", tags=["segmentation"])


@app.get("/")
def read_root():
    return {"message": "Segmentation service is running"}


@app.on_event("startup")
async def load_checkpoint_on_startup():
    if not settings.MODEL_CHECKPOINT:
        logger.warning("MODEL_CHECKPOINT is not set; segmentation is unavailable until a model is loaded")
        return
    try:
        model_service.load_model(settings.MODEL_CHECKPOINT)
    except Exception as e:
        # /segmentation/model-status reports model_loaded=false
        logger.error(f"Failed to load checkpoint {settings.MODEL_CHECKPOINT}: {str(e)}")


@app.on_event("shutdown")
async def release_model():
    model_service.unload()
    logger.info("Segmentation service stopped")
