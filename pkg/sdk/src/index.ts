export {
  ArkClient,
  RunHandle,
  connect,
  type ClientOptions,
  type FetchedTile,
  type LayerRow,
  type OutputLayerInfo,
  type RunOutput,
  type RunResults,
  type RunStatus,
  type SubscriptionInfo,
  type VersionRow,
  type WaitOptions,
} from "./client.js";

export {
  decodeChunk,
  encodeChunk,
  validMask,
  CHUNK_MAGIC,
  HEADER_SIZE,
  type Dtype,
  type Tile,
  type TileValues,
} from "./wire.js";

export {
  AccessDeniedError,
  ArkError,
  AuthenticationError,
  ConnectionError,
  HttpError,
  IntegrityError,
  NotFoundError,
  RunFailedError,
  RunPendingError,
  ValidationFailedError,
} from "./errors.js";
