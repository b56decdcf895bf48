// Non-blocking error toast; failures never clear the current session view.

let container: HTMLElement | null = null;

export function showToast(message: string, timeoutMs = 6000): void {
  if (!container) {
    container = document.createElement("div");
    container.id = "toast-container";
    document.body.appendChild(container);
  }
  const toast = document.createElement("div");
  toast.className = "toast";
  toast.textContent = message;
  container.appendChild(toast);
  setTimeout(() => toast.remove(), timeoutMs);
}
