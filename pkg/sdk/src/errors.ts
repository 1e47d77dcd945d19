/** Base class for everything this client throws on purpose. */
export class ArkError extends Error {
  constructor(message: string) {
    super(message);
    this.name = new.target.name;
  }
}

/** The service could not be reached at all (DNS, refused, reset). */
export class ConnectionError extends ArkError {}

/** 401: missing, malformed, or revoked bearer token. */
export class AuthenticationError extends ArkError {}

/** 403: the caller's clearance does not admit the data. The server never says which tag blocked it, and neither do we. */
export class AccessDeniedError extends ArkError {}

/** 404: no such resource, or one the caller is not allowed to know exists. */
export class NotFoundError extends ArkError {}

/** 409: results asked for while the run is still queued or running. */
export class RunPendingError extends ArkError {}

/** 422: the server rejected the request body; message carries the server's reason. */
export class ValidationFailedError extends ArkError {}

/** A run reached the failed state; message carries the recorded error. */
export class RunFailedError extends ArkError {}

/** Response bytes do not hash to the ref the server claimed for them. */
export class IntegrityError extends ArkError {}

/** Any status this client has no specific type for. */
export class HttpError extends ArkError {
  readonly status: number;
  constructor(status: number, message: string) {
    super(message);
    this.status = status;
  }
}

export function errorForStatus(status: number, detail: string): ArkError {
  switch (status) {
    case 401:
      return new AuthenticationError(detail);
    case 403:
      return new AccessDeniedError(detail);
    case 404:
      return new NotFoundError(detail);
    case 409:
      return new RunPendingError(detail);
    case 422:
      return new ValidationFailedError(detail);
    default:
      return new HttpError(status, detail);
  }
}
